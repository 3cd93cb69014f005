//! Text cross-entropy, delta-regression reconstruction and their weighted sum.
//!
//! Every loss exists twice: as a plain function on tensors (used for
//! reporting and as a reference) and as a graph builder (used for training).
//! Both use sum reduction over elements.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};

pub const DEFAULT_DELTA_ORDER: usize = 3;
pub const DEFAULT_LAMBDA_R: f64 = 0.1;

/// Per-example loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub recon_s: f64,
    pub recon_f: f64,
    pub recon_t: f64,
    pub recon: f64,
    pub total: f64,
    pub lambda_r: f64,
    pub k: usize,
}

impl LossBreakdown {
    pub fn new(ce: f64, recon: ReconTerms, lambda_r: f64, k: usize) -> Self {
        Self {
            ce,
            recon_s: recon.s,
            recon_f: recon.f,
            recon_t: recon.t,
            recon: recon.total,
            total: ce + lambda_r * recon.total,
            lambda_r,
            k,
        }
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.ce += b.ce;
            m.recon_s += b.recon_s;
            m.recon_f += b.recon_f;
            m.recon_t += b.recon_t;
            m.recon += b.recon;
            m.total += b.total;
        }
        m.ce /= n;
        m.recon_s /= n;
        m.recon_f /= n;
        m.recon_t /= n;
        m.recon /= n;
        m.total /= n;
        if let Some(first) = items.first() {
            m.lambda_r = first.lambda_r;
            m.k = first.k;
        }
        m
    }
}

/// The three reconstruction terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReconTerms {
    pub s: f64,
    pub f: f64,
    pub t: f64,
    pub total: f64,
}

fn check_targets(n_rows: usize, vocab: usize, targets: &[usize]) -> Result<()> {
    if targets.is_empty() || targets.len() != n_rows {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            lhs: vec![n_rows, vocab],
            rhs: vec![targets.len()],
        });
    }
    if let Some(&id) = targets.iter().find(|&&id| id >= vocab) {
        return Err(Error::InvalidToken { id, vocab_size: vocab });
    }
    Ok(())
}

/// Summed negative log-likelihood of `targets` under row-wise softmax.
pub fn ce_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.dims2()?;
    check_targets(n, v, targets)?;
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|x| x.to_f64_lossy()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total)
}

/// Row `t` is `z[t] - z[t + k]`; shape `(T - k) x F`.
pub fn delta_time<T: Real>(z: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (t, f) = z.dims2()?;
    if k == 0 || k >= t {
        return Err(Error::invalid(format!("delta_time order {k} needs 1 <= k < T = {t}")));
    }
    let d = z.data();
    let out = (0..(t - k) * f).map(|i| d[i] - d[i + k * f]).collect();
    Tensor::new(vec![t - k, f], out)
}

/// Column `j` is `z[:, j] - z[:, j + k]`; shape `T x (F - k)`.
pub fn delta_feat<T: Real>(z: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (t, f) = z.dims2()?;
    if k == 0 || k >= f {
        return Err(Error::invalid(format!("delta_feat order {k} needs 1 <= k < F = {f}")));
    }
    let d = z.data();
    let mut out = Vec::with_capacity(t * (f - k));
    for r in 0..t {
        for c in 0..f - k {
            out.push(d[r * f + c] - d[r * f + c + k]);
        }
    }
    Tensor::new(vec![t, f - k], out)
}

/// `sum |a - b| + sum (a - b)^2`.
pub fn l1_plus_l2<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "l1_plus_l2",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (mut l1, mut l2) = (T::zero(), T::zero());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        l1 = l1 + d.abs();
        l2 = l2 + d * d;
    }
    Ok((l1 + l2).to_f64_lossy())
}

/// Spectral, frequency-delta (order 1) and time-delta (orders `1..=k`) terms.
pub fn recon_loss<T: Real>(target: &Tensor<T>, pred: &Tensor<T>, k: usize) -> Result<ReconTerms> {
    if target.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: target.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    let (t, f) = target.dims2()?;
    if k >= t {
        return Err(Error::invalid(format!("delta order {k} needs at least {} frames, got {t}", k + 1)));
    }
    let s = l1_plus_l2(target, pred)?;
    let fr = if f > 1 {
        l1_plus_l2(&delta_feat(target, 1)?, &delta_feat(pred, 1)?)?
    } else {
        0.0
    };
    let mut tm = 0.0;
    for order in 1..=k {
        tm += l1_plus_l2(&delta_time(target, order)?, &delta_time(pred, order)?)?;
    }
    Ok(ReconTerms {
        s,
        f: fr,
        t: tm,
        total: s + fr + tm,
    })
}

pub fn total_loss(ce: f64, recon: f64, lambda_r: f64) -> Result<f64> {
    if !(lambda_r >= 0.0) {
        return Err(Error::invalid(format!("lambda_r must be >= 0, got {lambda_r}")));
    }
    Ok(ce + lambda_r * recon)
}

// ------------------------------------------------------------------ graph

/// Graph form of [`ce_loss`]; returns a scalar node.
pub fn ce_loss_var<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (n, v) = match *g.shape(logits) {
        [n, v] => (n, v),
        ref s => return Err(Error::invalid(format!("ce_loss: logits must be rank 2, got {s:?}"))),
    };
    check_targets(n, v, targets)?;
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, targets)?;
    let s = g.sum(picked)?;
    g.scale(s, -T::one())
}

pub fn delta_time_var<T: Real>(g: &mut Graph<T>, z: Var, k: usize) -> Result<Var> {
    let t = g.shape(z)[0];
    if k == 0 || k >= t {
        return Err(Error::invalid(format!("delta_time order {k} needs 1 <= k < T = {t}")));
    }
    let head = g.slice_rows(z, 0, t - k)?;
    let tail = g.slice_rows(z, k, t)?;
    g.sub(head, tail)
}

pub fn delta_feat_var<T: Real>(g: &mut Graph<T>, z: Var, k: usize) -> Result<Var> {
    let f = g.shape(z)[1];
    if k == 0 || k >= f {
        return Err(Error::invalid(format!("delta_feat order {k} needs 1 <= k < F = {f}")));
    }
    let head = g.slice_cols(z, 0, f - k)?;
    let tail = g.slice_cols(z, k, f)?;
    g.sub(head, tail)
}

pub fn l1_plus_l2_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    let l1 = g.sum(ad)?;
    let sq = g.square(d)?;
    let l2 = g.sum(sq)?;
    g.add(l1, l2)
}

/// Scalar nodes for each reconstruction term.
#[derive(Debug, Clone, Copy)]
pub struct ReconVars {
    pub s: Var,
    pub f: Option<Var>,
    pub t: Var,
    pub total: Var,
}

pub fn recon_loss_var<T: Real>(g: &mut Graph<T>, target: Var, pred: Var, k: usize) -> Result<ReconVars> {
    if g.shape(target) != g.shape(pred) {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: g.shape(target).to_vec(),
            rhs: g.shape(pred).to_vec(),
        });
    }
    let (t, f) = match *g.shape(target) {
        [t, f] => (t, f),
        ref s => return Err(Error::invalid(format!("recon_loss: expected T x F, got {s:?}"))),
    };
    if k == 0 || k >= t {
        return Err(Error::invalid(format!("delta order {k} needs 1 <= K < T = {t}")));
    }
    let s = l1_plus_l2_var(g, target, pred)?;
    let fr = if f > 1 {
        let a = delta_feat_var(g, target, 1)?;
        let b = delta_feat_var(g, pred, 1)?;
        Some(l1_plus_l2_var(g, a, b)?)
    } else {
        None
    };
    let mut tm: Option<Var> = None;
    for order in 1..=k {
        let a = delta_time_var(g, target, order)?;
        let b = delta_time_var(g, pred, order)?;
        let term = l1_plus_l2_var(g, a, b)?;
        tm = Some(match tm {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let tm = tm.expect("k >= 1");
    let mut total = g.add(s, tm)?;
    if let Some(fr) = fr {
        total = g.add(total, fr)?;
    }
    Ok(ReconVars { s, f: fr, t: tm, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, grad_check_many, GradCheckOptions};
    use proptest::prelude::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let uniform = Tensor::<f64>::zeros(vec![1, 256]);
        assert!((ce_loss(&uniform, &[17]).unwrap() - 256f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 8];
        sat[3] = 30.0;
        assert!(ce_loss(&t2(1, 8, &sat), &[3]).unwrap() < 1e-9);
        assert!(matches!(ce_loss(&uniform, &[256]), Err(Error::InvalidToken { id: 256, .. })));
    }

    #[test]
    fn delta_examples() {
        let z = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 6.0, 8.0]);
        assert_eq!(delta_time(&z, 1).unwrap().data(), &[-2.0, -2.0, -3.0, -4.0]);
        assert_eq!(delta_time(&z, 2).unwrap().data(), &[-5.0, -6.0]);
        assert!(delta_time(&z, 3).is_err());
        let z2 = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(delta_feat(&z2, 1).unwrap().data(), &[-1.0, -1.0]);
        assert_eq!(delta_time(&Tensor::<f64>::zeros(vec![77, 128]), 3).unwrap().shape(), &[74, 128]);
        assert_eq!(delta_feat(&Tensor::<f64>::zeros(vec![77, 128]), 1).unwrap().shape(), &[77, 127]);
    }

    #[test]
    fn recon_worked_example() {
        let x = t2(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let r = recon_loss(&x, &Tensor::zeros(vec![2, 2]), 1).unwrap();
        assert_eq!((r.s, r.f, r.t, r.total), (4.0, 0.0, 4.0, 8.0));
        assert_eq!(l1_plus_l2(&t2(1, 1, &[1.0]), &t2(1, 1, &[3.0])).unwrap(), 6.0);
        assert!(recon_loss(&x, &x, 2).is_err());
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(2.0, 8.0, 0.1).unwrap() - 2.8).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 8.0, 0.0).unwrap(), 2.0);
        assert!(total_loss(2.0, 8.0, -1.0).is_err());
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let x = t2(4, 3, &[0.1, -0.3, 0.7, 1.2, 0.4, -0.8, 0.0, 0.5, 0.9, -1.1, 0.2, 0.6]);
        let y = t2(4, 3, &[0.3, 0.1, -0.2, 0.8, 0.9, -0.1, 0.4, 0.2, 1.3, -0.4, 0.0, 0.1]);
        let mut g = Graph::<f64>::new();
        let (vx, vy) = (g.input(x.clone()).unwrap(), g.input(y.clone()).unwrap());
        let r = recon_loss_var(&mut g, vx, vy, 3).unwrap();
        let plain = recon_loss(&x, &y, 3).unwrap();
        assert!((g.value(r.total).item().unwrap() - plain.total).abs() < 1e-12);
        let ce = ce_loss_var(&mut g, vx, &[0, 2, 1, 1]).unwrap();
        assert!((g.value(ce).item().unwrap() - ce_loss(&x, &[0, 2, 1, 1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradients_of_the_objective() {
        let target = t2(5, 4, &(0..20).map(|i| ((i * 7) % 11) as f64 * 0.3).collect::<Vec<_>>());
        let pred = t2(5, 4, &(0..20).map(|i| ((i * 5) % 13) as f64 * 0.17 + 0.011).collect::<Vec<_>>());
        let logits = t2(3, 6, &(0..18).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let opts = GradCheckOptions::default();
        let rep = grad_check_many(
            |g, v| {
                let tgt = g.constant(target.clone())?;
                let r = recon_loss_var(g, tgt, v[0], 3)?;
                let ce = ce_loss_var(g, v[1], &[1, 4, 0])?;
                let w = g.scale(r.total, 0.1)?;
                g.add(ce, w)
            },
            &[pred, logits],
            &opts,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn l1_kink_is_not_a_spurious_pass() {
        let z = t2(1, 3, &[1.0, 0.0, 2.0]);
        let err = grad_check(
            |g, v| {
                let zero = g.constant(Tensor::zeros(vec![1, 3]))?;
                l1_plus_l2_var(g, v, zero)
            },
            &z,
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonSmoothPoint { index: 1, .. })));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric(a in matrix(6, 5), b in matrix(6, 5)) {
            prop_assert_eq!(l1_plus_l2(&a, &b).unwrap(), l1_plus_l2(&b, &a).unwrap());
        }

        #[test]
        fn self_reconstruction_is_zero(a in matrix(6, 5), k in 1usize..6) {
            prop_assert_eq!(recon_loss(&a, &a, k).unwrap().total, 0.0);
        }

        #[test]
        fn nondecreasing_along_a_ray(a in matrix(3, 4), dir in matrix(3, 4)) {
            let mut prev = 0.0;
            for step in 0..10 {
                let eps = step as f64 * 0.25;
                let moved = Tensor::new(vec![3, 4], a.data().iter().zip(dir.data()).map(|(x, d)| x + eps * d).collect()).unwrap();
                let v = l1_plus_l2(&a, &moved).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn ce_splits_additively(logits in matrix(7, 5), cut in 1usize..7, ids in proptest::collection::vec(0usize..5, 7)) {
            let whole = ce_loss(&logits, &ids).unwrap();
            let a = ce_loss(&logits.slice_rows(0, cut).unwrap(), &ids[..cut]).unwrap();
            let b = ce_loss(&logits.slice_rows(cut, 7).unwrap(), &ids[cut..]).unwrap();
            prop_assert!((a + b - whole).abs() <= 1e-12 * whole.abs().max(1.0));
        }
    }
}
