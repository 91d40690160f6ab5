//! Parameter handles and the two small layers everything else is made of.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Parameter variables bound on a tape, keyed by name.
pub type Bound = BTreeMap<String, Var>;

pub(crate) fn lookup(vars: &Bound, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound")))
}

/// `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn bind(vars: &Bound, prefix: &str) -> Result<Self> {
        Ok(LinearVars {
            w: lookup(vars, &format!("{prefix}.w"))?,
            b: lookup(vars, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row(xw, self.b)
    }
}

/// One ReLU hidden layer followed by a linear output layer.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
}

impl MlpVars {
    pub fn bind(vars: &Bound, prefix: &str) -> Result<Self> {
        Ok(MlpVars {
            hidden: LinearVars::bind(vars, &format!("{prefix}.hidden"))?,
            out: LinearVars::bind(vars, &format!("{prefix}.out"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.apply(tape, x)?;
        let h = tape.relu(h)?;
        self.out.apply(tape, h)
    }
}

/// Weights of a single-layer LSTM with gate blocks ordered `[i | f | g | o]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `in x 4d`
    pub w_ih: Var,
    /// `d x 4d`
    pub w_hh: Var,
    /// `1 x 4d`
    pub b: Var,
}

impl LstmVars {
    pub fn bind(vars: &Bound, prefix: &str) -> Result<Self> {
        Ok(LstmVars {
            w_ih: lookup(vars, &format!("{prefix}.w_ih"))?,
            w_hh: lookup(vars, &format!("{prefix}.w_hh"))?,
            b: lookup(vars, &format!("{prefix}.b"))?,
        })
    }
}
