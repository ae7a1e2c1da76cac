use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient check: max over coordinates of
/// `|analytic - fd| / (|analytic| + 1e-8)`.
///
/// The closure must rebuild the computation from scratch on the given tape —
/// it is called once for the analytic gradient and twice per coordinate for
/// the probes, with recording disabled for the probes.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    assert!(h > 0.0, "finite_diff_check: step must be positive, got {h}");

    let mut tape = Tape::new();
    let xt = tape.watch(x);
    let loss = f(&mut tape, &xt);
    if loss.numel() != 1 {
        return Err(Error::LossNotScalar(loss.shape().to_vec()));
    }
    let grad = tape
        .backward(&loss, &[&xt], false)?
        .pop()
        .expect("one gradient for one wrt");

    let eval = |data: Vec<f64>| -> f64 {
        let mut t = Tape::new();
        t.set_recording(false);
        let probe = t.watch(&Tensor::from_vec(x.shape(), data));
        f(&mut t, &probe).item()
    };

    let base = x.data();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += h;
        let mut minus = base.to_vec();
        minus[i] -= h;
        let (fp, fm) = (eval(plus), eval(minus));
        if !fp.is_finite() || !fm.is_finite() || !grad.data()[i].is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (grad.data()[i] - fd).abs() / (grad.data()[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Plain gradient step `p - lr * g`, off-tape: outer-loop updates are not
/// differentiated through.
pub fn sgd_update(params: &[Tensor], grads: &[Tensor], lr: f64) -> Vec<Tensor> {
    assert!(
        params.len() == grads.len(),
        "sgd_update: {} params vs {} grads",
        params.len(),
        grads.len()
    );
    assert!(lr.is_finite() && lr >= 0.0, "sgd_update: bad learning rate {lr}");
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            assert!(
                p.shape() == g.shape(),
                "sgd_update: shape mismatch {:?} vs {:?}",
                p.shape(),
                g.shape()
            );
            let data = p.data().iter().zip(g.data()).map(|(&pv, &gv)| pv - lr * gv).collect();
            Tensor::from_vec(p.shape(), data)
        })
        .collect()
}
