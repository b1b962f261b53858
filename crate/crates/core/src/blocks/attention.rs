use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// MAC tag for query·key score products.
pub const ATTENTION_SCORES_TAG: &str = "attention_scores";

/// `softmax(q·kᵀ/√d)·v` batched over the leading axis.
///
/// `q` is `B×N×d`, `k` is `B×M×d`, `v` is `B×M×d_v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention_with_weights(tape, q, k, v)?.0)
}

/// As [`attention`], also returning the `B×N×M` softmax weights.
pub fn attention_with_weights(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap();
    let scores = tape.with_tag(ATTENTION_SCORES_TAG, |t| t.matmul_nt(q, k))?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let rank = tape.shape(scaled).len();
    let weights = tape.softmax(scaled, rank - 1)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// Dense single-head attention evaluated with explicit loops.
///
/// `q` is `N×c`, `k` and `v` are `N_k×c`; the scale is `1/√c`.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let ([n, c], [nk, ck], [nv, cv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::InvalidArgument("naive_attention expects matrices".into()));
    };
    let (n, c, nk) = (*n, *c, *nk);
    if *ck != c || *cv != c {
        return Err(Error::shape("naive_attention", q.shape(), k.shape()));
    }
    if *nv != nk {
        return Err(Error::shape("naive_attention", k.shape(), v.shape()));
    }
    let scale = 1.0 / (c as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; n * c];
    let mut s = vec![0.0; nk];
    for i in 0..n {
        for j in 0..nk {
            let mut acc = 0.0;
            for p in 0..c {
                acc += qd[i * c + p] * kd[j * c + p];
            }
            s[j] = acc * scale;
        }
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in s.iter_mut() {
            *e = (*e - m).exp();
            z += *e;
        }
        for j in 0..nk {
            let a = s[j] / z;
            for p in 0..c {
                out[i * c + p] += a * vd[j * c + p];
            }
        }
    }
    Tensor::new(&[n, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_returns_value() {
        let q = Tensor::new(&[1, 3], vec![4.0, -2.0, 9.0]).unwrap();
        let k = Tensor::new(&[1, 3], vec![0.1, 7.0, -3.0]).unwrap();
        let v = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(naive_attention(&q, &k, &v).unwrap().data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::randn(&[3, 2], &mut rng);
        let k = Tensor::new(&[4, 2], [0.3, -0.7].repeat(4)).unwrap();
        let v = Tensor::randn(&[4, 2], &mut rng);
        let out = naive_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for p in 0..2 {
                let mean = (0..4).map(|j| v.at(&[j, p])).sum::<f64>() / 4.0;
                assert!((out.at(&[i, p]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tape_attention_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(&[4, 2], &mut rng);
        let k = Tensor::randn(&[4, 2], &mut rng);
        let v = Tensor::randn(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let qv = tape.constant(q.reshape(&[1, 4, 2]).unwrap());
        let kv = tape.constant(k.reshape(&[1, 4, 2]).unwrap());
        let vv = tape.constant(v.reshape(&[1, 4, 2]).unwrap());
        let o = attention(&mut tape, qv, kv, vv).unwrap();
        let oracle = naive_attention(&q, &k, &v).unwrap();
        assert!(tape.value(o).reshape(&[4, 2]).unwrap().max_abs_diff(&oracle) < 1e-12);
    }
}
