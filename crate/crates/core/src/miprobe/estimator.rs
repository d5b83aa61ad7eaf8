use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn counts<T: Hash + Eq + Ord + Copy>(xs: &[T]) -> Vec<(T, usize)> {
    let mut m: HashMap<T, usize> = HashMap::new();
    for &x in xs {
        *m.entry(x).or_default() += 1;
    }
    let mut v: Vec<(T, usize)> = m.into_iter().collect();
    v.sort_unstable();
    v
}

/// Plug-in entropy of the empirical distribution, in bits.
pub fn entropy<T: Hash + Eq + Ord + Copy>(samples: &[T]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = samples.len() as f64;
    Ok(counts(samples)
        .iter()
        .map(|&(_, c)| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Plug-in mutual information of paired samples, in bits:
/// `sum p(a,b) log2(p(a,b) / (p(a) p(b)))` over observed cells.
pub fn mutual_information<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Hash + Eq + Ord + Copy,
    B: Hash + Eq + Ord + Copy,
{
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "sample sequences differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = a.len() as f64;
    let ca: HashMap<A, usize> = counts(a).into_iter().collect();
    let cb: HashMap<B, usize> = counts(b).into_iter().collect();
    let pairs: Vec<(A, B)> = a.iter().copied().zip(b.iter().copied()).collect();
    let mut mi = 0.0;
    for ((x, y), c) in counts(&pairs) {
        let c = c as f64;
        mi += c / n * (c * n / (ca[&x] as f64 * cb[&y] as f64)).log2();
    }
    // A bijection gives exactly H(A); any tiny negative is rounding.
    Ok(mi.max(0.0))
}

/// MI of an explicit joint distribution `joint[i][j] = p(a_i, b_j)`, bits.
pub fn mi_from_joint(joint: &[Vec<f64>]) -> Result<f64> {
    let rows = joint.len();
    let cols = joint.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || joint.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("joint table must be a non-empty rectangle"));
    }
    if joint.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("joint probabilities must be finite and non-negative"));
    }
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("joint sums to {total}, not 1")));
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in joint.iter().enumerate() {
        for (j, &p) in r.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_gives_entropy() {
        let x: Vec<u32> = (0..8).collect();
        assert_eq!(mutual_information(&x, &x).unwrap(), 3.0);
        assert_eq!(entropy(&x).unwrap(), 3.0);
    }

    #[test]
    fn product_grid_is_independent() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..5u32 {
            for j in 0..3u32 {
                a.push(i);
                b.push(j);
            }
        }
        assert!(mutual_information(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(mutual_information(&[1u8, 2], &[1u8]).is_err());
        assert!(mutual_information::<u8, u8>(&[], &[]).is_err());
    }

    #[test]
    fn joint_table_validation() {
        assert!(mi_from_joint(&[vec![0.5, 0.6]]).is_err());
        assert!(mi_from_joint(&[vec![0.5], vec![0.5, 0.0]]).is_err());
        assert_eq!(mi_from_joint(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap(), 1.0);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.9986).abs() < 1e-3);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_bounded(pairs in proptest::collection::vec((0u8..6, 0u8..4), 1..200)) {
            let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let ab = mutual_information(&a, &b).unwrap();
            let ba = mutual_information(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            let bound = entropy(&a).unwrap().min(entropy(&b).unwrap());
            prop_assert!(ab <= bound + 1e-9);
        }
    }
}
