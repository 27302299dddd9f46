//! Closed-form merge cost model in exact integer arithmetic.

use crate::error::{Error, Result};
use crate::merge::MergeMethod;

/// Cost inputs: `t` tasks, `n × n` layers, `l` covariance samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopModel {
    pub method: MergeMethod,
    pub t: u64,
    pub n: u64,
    /// Only used for the RegMean preprocessing cost.
    pub l: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub merge: u128,
    /// Covariance accumulation; nonzero for RegMean only.
    pub preprocess: u128,
}

impl FlopCount {
    pub fn total(&self) -> u128 {
        self.merge + self.preprocess
    }
}

impl FlopModel {
    pub fn new(method: MergeMethod, t: u64, n: u64, l: u64) -> Result<Self> {
        let m = FlopModel { method, t, n, l };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.n == 0 || self.l == 0 {
            return Err(Error::InvalidInput(format!(
                "flop model needs T, N, L >= 1, got T={} N={} L={}",
                self.t, self.n, self.l
            )));
        }
        Ok(())
    }

    pub fn flops(&self) -> Result<FlopCount> {
        self.validate()?;
        let (t, n, l) = (self.t as u128, self.n as u128, self.l as u128);
        let n2 = n * n;
        let n3 = n2 * n;
        let merge = match self.method {
            MergeMethod::Average => t * n2,
            MergeMethod::TaskArithmetic => (2 * t + 1) * n2,
            MergeMethod::RegMean => (t + 3) * n3 + (2 * t - 2) * n2,
            MergeMethod::ActMat => (2 * t + 3) * n3 + (3 * t - 2) * n2,
            MergeMethod::IsoC => 23 * n3 + (2 * t + 2) * n2 + n,
            MergeMethod::Tsv => (22 * t + 45) * n3 + (t + 3) * n2,
        };
        let preprocess = match self.method {
            MergeMethod::RegMean => (2 * l - 1) * t * n2,
            _ => 0,
        };
        Ok(FlopCount { merge, preprocess })
    }
}

/// Number of sequential SVD or inverse calls per layer.
pub fn expensive_ops(method: MergeMethod, t: u64) -> u64 {
    match method {
        MergeMethod::Average | MergeMethod::TaskArithmetic => 0,
        MergeMethod::RegMean | MergeMethod::ActMat | MergeMethod::IsoC => 1,
        MergeMethod::Tsv => t + 2,
    }
}
