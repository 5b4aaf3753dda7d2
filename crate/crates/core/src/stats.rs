//! Summary statistics and Hartigan's dip test of unimodality.
//!
//! Variances use the population (divide-by-n) convention throughout the crate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn population_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn population_sd(x: &[f64]) -> f64 {
    population_var(x).sqrt()
}

/// Sample standard deviation (divide by n - 1), used only for Monte Carlo
/// error bands.
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

/// Linear-interpolation quantile (type 7) of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Hartigan's dip statistic of a sample.
///
/// Follows the Hartigan & Hartigan (1985) algorithm as maintained in the R
/// `diptest` package, with the statistic floored at `1 / (2n)`.
pub fn dip_statistic(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::invalid("dip test on an empty sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("dip test on non-finite data"));
    }
    let n = sample.len();
    // One-based copy so the index arithmetic stays close to the reference.
    let mut x = Vec::with_capacity(n + 1);
    x.push(0.0);
    x.extend_from_slice(sample);
    x[1..].sort_by(f64::total_cmp);

    let mut dip = 1.0;
    if n < 2 || x[n] == x[1] {
        return Ok(dip / (2 * n) as f64);
    }

    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1 || (x[j] - x[mnj]) * ((mnj - mnmnj) as f64) < (x[mnj] - x[mnmnj]) * ((j - mnj) as f64) {
                break;
            }
            mn[j] = mnmnj;
        }
    }
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n || (x[k] - x[mjk]) * (mjk as f64 - mjmjk as f64) < (x[mjk] - x[mjmjk]) * (k as f64 - mjk as f64) {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];
    let (mut low, mut high) = (1usize, n);
    loop {
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;

        lcm[1] = low;
        let mut i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2;

        let mut d = 0.0;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0) - (x[lcmiv] - x[gcmi1]) * (gcmix - gcmi1) as f64 / (x[gcmix] - x[gcmi1]);
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x[gcmix] - x[lcmiv1]) * (lcmiv - lcmiv1) as f64 / (x[lcmiv] - x[lcmiv1]) - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                ix = ix.max(1);
                iv = iv.min(l_lcm);
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        } else {
            d = 1.0;
        }
        if d < dip {
            break;
        }

        let mut dip_l: f64 = 0.0;
        for j in ig..l_gcm {
            let mut max_t: f64 = 1.0;
            let (jb, je) = (gcm[j + 1], gcm[j]);
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x[jj] - x[jb]) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u: f64 = 0.0;
        for k in ih..l_lcm {
            let mut max_t: f64 = 1.0;
            let (kb, ke) = (lcm[k], lcm[k + 1]);
            if ke - kb > 1 && x[ke] != x[kb] {
                let c = (ke - kb) as f64 / (x[ke] - x[kb]);
                for kk in kb..=ke {
                    let t = kk as f64 - kb as f64 - 1.0 - (x[kk] - x[kb]) * c;
                    max_t = max_t.max(-t);
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = f64::max(dip, dip_u.max(dip_l));

        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    Ok(dip / (2 * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DipTest {
    pub dip: f64,
    pub p_value: f64,
}

/// Dip statistic with a Monte Carlo p-value against uniform samples of the
/// same size (the least favourable unimodal null).
pub fn dip_test(sample: &[f64], replicates: usize, seed: u64) -> Result<DipTest> {
    if replicates == 0 {
        return Err(Error::invalid("dip test needs at least one replicate"));
    }
    let dip = dip_statistic(sample)?;
    let mut rng = stream(seed);
    let mut buf = vec![0.0; sample.len()];
    let mut exceed = 0usize;
    for _ in 0..replicates {
        buf.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        if dip_statistic(&buf)? >= dip {
            exceed += 1;
        }
    }
    Ok(DipTest {
        dip,
        p_value: (exceed + 1) as f64 / (replicates + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream};

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((population_var(&[1.0, 2.0, 3.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(population_sd(&[-1.0, 1.0]), 1.0);
        assert_eq!(quantile_sorted(&[0.0, 1.0, 2.0], 0.25), 0.5);
    }

    // Reference values from the `diptest` package (Python port of the R
    // implementation). That port floors at 0 rather than 1/(2n), so the
    // floor case is checked separately.
    #[test]
    fn dip_matches_reference_values() {
        let bimodal = [
            2.041, -2.556, 0.418, -0.568, -0.453, -0.216, -2.02, -0.232, -0.865, 3.323, 0.226, -0.353, -0.281, -0.668, -1.055, 3.609, 4.482, 3.761, 4.958, 3.8,
            4.024, 5.546, 4.545, 3.495, 3.817, 4.541, 5.935, 3.73, 3.756, 5.002,
        ];
        let normal = [
            -0.886, -0.292, 0.883, 0.58, 0.092, 0.67, -2.828, 1.021, -0.96, -1.669, 0.276, 0.701, -0.445, -1.076, 0.026, -0.053, 1.406, 0.747, 0.194, 1.112,
            -0.206, -0.926, 0.584, 0.583, -0.215,
        ];
        let cases: [(&[f64], f64); 6] = [
            (&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 0.25),
            (&[0.0, 1.0, 2.0, 10.0, 11.0, 12.0], 0.19999999999999998),
            (&[0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 5.3, 9.0], 0.18),
            (&[0.3, 1.7, 2.2, 2.9, 3.0, 7.5, 8.1, 8.2, 9.9], 0.14492753623188406),
            (&bimodal, 0.11604233287650374),
            (&normal, 0.05591125198098256),
        ];
        for (x, want) in cases {
            let got = dip_statistic(x).unwrap();
            assert!((got - want).abs() < 1e-12, "{x:?}: {got} vs {want}");
        }
        assert_eq!(dip_statistic(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.125);
        assert_eq!(dip_statistic(&[5.0]).unwrap(), 0.5);
    }

    #[test]
    fn dip_is_order_invariant_and_bounded() {
        let mut rng = stream(4);
        let x = normals(&mut rng, 200);
        let mut rev = x.clone();
        rev.reverse();
        let d = dip_statistic(&x).unwrap();
        assert_eq!(d, dip_statistic(&rev).unwrap());
        assert!(d >= 1.0 / 400.0 && d <= 0.25);
    }

    #[test]
    fn dip_test_separates_modes() {
        let mut rng = stream(8);
        let uni = normals(&mut rng, 300);
        let bi: Vec<f64> = normals(&mut rng, 300)
            .into_iter()
            .enumerate()
            .map(|(i, z)| 0.3 * z + if i % 2 == 0 { 0.0 } else { 3.0 })
            .collect();
        assert!(dip_test(&uni, 500, 1).unwrap().p_value > 0.05);
        assert!(dip_test(&bi, 500, 1).unwrap().p_value < 0.01);
    }
}
