use std::fmt;

use crate::numerics::NumericsError;

/// Boolean allow-matrix: `allow(i, j)` means query row `i` may attend to key `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

/// Which mask a task runs the shared backbone under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Causal,
    Full,
}

impl MaskKind {
    pub fn build(self, len: usize) -> AttentionMask {
        match self {
            MaskKind::Causal => AttentionMask::causal(len),
            MaskKind::Full => AttentionMask::full(len),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Causal => "causal",
            MaskKind::Full => "full",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "causal" => Ok(MaskKind::Causal),
            "full" => Ok(MaskKind::Full),
            other => Err(format!("unknown mask kind `{other}` (expected causal|full)")),
        }
    }
}

impl AttentionMask {
    /// Raw constructor; no invariant checks. See [`AttentionMask::validate`].
    pub fn from_allow(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self, NumericsError> {
        if allow.len() != rows * cols {
            return Err(NumericsError::dim(
                "attention_mask",
                format!("{rows}x{cols} mask needs {} entries, got {}", rows * cols, allow.len()),
            ));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..rows * cols).map(|idx| f(idx / cols, idx % cols)).collect();
        Self { rows, cols, allow }
    }

    /// Lower-triangular: `j <= i`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i)
    }

    /// Every position sees every position.
    pub fn full(len: usize) -> Self {
        Self::from_fn(len, len, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allow(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn is_all_true(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Every row has at least one allowed entry and, for square masks, the
    /// diagonal is allowed.
    pub fn validate(&self) -> Result<(), NumericsError> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(NumericsError::Contract(format!("attention mask row {i} is fully masked")));
            }
            if self.rows == self.cols && !self.allow(i, i) {
                return Err(NumericsError::Contract(format!("attention mask diagonal ({i},{i}) is masked")));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: String = self.row(i).iter().map(|&a| if a { '1' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_is_lower_triangular() {
        let m = AttentionMask::causal(5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allow(i, j), j <= i);
            }
        }
        m.validate().unwrap();
    }

    #[test]
    fn full_allows_everything() {
        let m = AttentionMask::full(4);
        assert!(m.is_all_true());
        m.validate().unwrap();
    }

    #[test]
    fn validate_rejects_empty_row_and_masked_diagonal() {
        let m = AttentionMask::from_fn(3, 3, |i, j| i != 1 && j <= i);
        assert!(matches!(m.validate(), Err(NumericsError::Contract(_))));
        let m = AttentionMask::from_fn(2, 2, |i, j| i != j);
        assert!(m.validate().is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("full".parse::<MaskKind>().unwrap(), MaskKind::Full);
        assert_eq!("causal".parse::<MaskKind>().unwrap(), MaskKind::Causal);
        assert!("ar".parse::<MaskKind>().is_err());
    }
}
