use super::{apply_bin, apply_unary, BinOp, Bindings, EvalError, Expr, Func, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Load(Var),
    Neg,
    Bin(BinOp),
    Unary(Func),
    Min,
    Max,
}

/// Postfix instruction tape. Executes the same floating-point operations
/// in the same order as the tree walk, so results are bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    ops: Vec<Op>,
    depth: usize,
}

const INLINE_STACK: usize = 32;

impl Tape {
    pub fn compile(e: &Expr) -> Tape {
        let mut ops = Vec::new();
        emit(e, &mut ops);
        let mut depth = 0usize;
        let mut cur = 0isize;
        for op in &ops {
            cur += match op {
                Op::Const(_) | Op::Load(_) => 1,
                Op::Neg | Op::Unary(_) => 0,
                Op::Bin(_) | Op::Min | Op::Max => -1,
            };
            depth = depth.max(cur as usize);
        }
        Tape { ops, depth }
    }

    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64, EvalError> {
        if self.depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.run(b, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            self.run(b, &mut stack)
        }
    }

    fn run(&self, b: &Bindings<'_>, stack: &mut [f64]) -> Result<f64, EvalError> {
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    stack[sp] = v;
                    sp += 1;
                }
                Op::Load(v) => {
                    stack[sp] = b.get(v);
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Unary(f) => stack[sp - 1] = apply_unary(f, stack[sp - 1])?,
                Op::Bin(op) => {
                    sp -= 1;
                    stack[sp - 1] = apply_bin(op, stack[sp - 1], stack[sp])?;
                }
                Op::Min => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].min(stack[sp]);
                }
                Op::Max => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].max(stack[sp]);
                }
            }
        }
        Ok(stack[0])
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>) {
    match e {
        Expr::Num(v) => ops.push(Op::Const(*v)),
        Expr::Var(v) => ops.push(Op::Load(*v)),
        Expr::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Expr::Bin(op, a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(Op::Bin(*op));
        }
        Expr::Call(f, args) => {
            for a in args {
                emit(a, ops);
            }
            ops.push(match f {
                Func::Min => Op::Min,
                Func::Max => Op::Max,
                f => Op::Unary(*f),
            });
        }
    }
}
