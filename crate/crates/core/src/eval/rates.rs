//! Error rates over verification outcomes, in percent.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub far: f64,
    pub frr: f64,
    pub ter: f64,
}

/// FAR, FRR and their sum from `(kind, accepted)` outcomes.
pub fn compute_rates(verdicts: &[(TrialKind, bool)]) -> Result<Rates> {
    let (mut ng, mut ni, mut fr, mut fa) = (0usize, 0usize, 0usize, 0usize);
    for &(kind, accept) in verdicts {
        match kind {
            TrialKind::Genuine => {
                ng += 1;
                fr += usize::from(!accept);
            }
            TrialKind::Impostor => {
                ni += 1;
                fa += usize::from(accept);
            }
        }
    }
    if ng == 0 {
        return Err(Error::EmptyInput("no genuine trials"));
    }
    if ni == 0 {
        return Err(Error::EmptyInput("no impostor trials"));
    }
    let far = 100.0 * fa as f64 / ni as f64;
    let frr = 100.0 * fr as f64 / ng as f64;
    Ok(Rates {
        far,
        frr,
        ter: far + frr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use TrialKind::*;

    fn trials(
        gen_reject: usize,
        gen: usize,
        imp_accept: usize,
        imp: usize,
    ) -> Vec<(TrialKind, bool)> {
        let mut v = vec![];
        v.extend((0..gen).map(|i| (Genuine, i >= gen_reject)));
        v.extend((0..imp).map(|i| (Impostor, i < imp_accept)));
        v
    }

    #[test]
    fn examples() {
        let r = compute_rates(&trials(0, 5, 0, 5)).unwrap();
        assert_eq!((r.far, r.frr, r.ter), (0.0, 0.0, 0.0));
        let r = compute_rates(&trials(5, 5, 5, 5)).unwrap();
        assert_eq!((r.far, r.frr, r.ter), (100.0, 100.0, 200.0));
        let r = compute_rates(&trials(1, 20, 2, 10)).unwrap();
        assert_eq!((r.far, r.frr, r.ter), (20.0, 5.0, 25.0));
    }

    #[test]
    fn empty_category() {
        assert!(compute_rates(&trials(0, 3, 0, 0)).is_err());
        assert!(compute_rates(&trials(0, 0, 0, 3)).is_err());
    }
}
