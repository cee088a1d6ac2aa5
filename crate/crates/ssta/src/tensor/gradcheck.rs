//! Central finite-difference checking of tape gradients.
//!
//! The numeric side never touches [`Tape::backward`]: it re-runs the
//! forward build with perturbed inputs, so it stays an independent check
//! of the reverse sweep.

use std::collections::BTreeMap;

use super::{Result, Scalar, Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: Scalar,
    pub rel_tol: Scalar,
    pub abs_tol: Scalar,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst |analytic − numeric| / (abs_tol + rel_tol·max(|analytic|, |numeric|));
    /// values ≤ 1 are within tolerance.
    pub max_scaled_err: Scalar,
    pub entries_checked: usize,
    pub worst: Option<(String, usize, Scalar, Scalar)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_scaled_err <= 1.0
    }
}

/// Checks every entry of every named input against central differences.
/// `build` must construct the same scalar loss for any given input map.
pub fn check_gradients<F>(
    build: F,
    inputs: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, ValueId>) -> Result<ValueId>,
{
    let register = |tape: &mut Tape, values: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, ValueId>> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in values {
            ids.insert(name.clone(), tape.input(name, tensor)?);
        }
        Ok(ids)
    };

    let mut tape = Tape::new();
    let ids = register(&mut tape, inputs)?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &BTreeMap<String, Tensor>| -> Result<Scalar> {
        let mut tape = Tape::new();
        let ids = register(&mut tape, values)?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_scaled_err: 0.0,
        entries_checked: 0,
        worst: None,
    };
    for (name, tensor) in inputs {
        let analytic = grads.get(name).expect("backward returns every named leaf");
        for idx in 0..tensor.numel() {
            let mut plus = inputs.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += cfg.step;
            let mut minus = inputs.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= cfg.step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let scale = cfg.abs_tol + cfg.rel_tol * a.abs().max(numeric.abs());
            let err = (a - numeric).abs() / scale;
            report.entries_checked += 1;
            if err > report.max_scaled_err {
                report.max_scaled_err = err;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Panics with the offending entry when a check fails; for test use.
pub fn assert_gradients_match<F>(build: F, inputs: &BTreeMap<String, Tensor>, cfg: &GradCheckConfig)
where
    F: Fn(&mut Tape, &BTreeMap<String, ValueId>) -> Result<ValueId>,
{
    let report = check_gradients(build, inputs, cfg).expect("gradcheck build failed");
    assert!(
        report.passed(),
        "gradient check failed: worst entry {:?}, scaled error {}",
        report.worst,
        report.max_scaled_err
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composite_graph_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::uniform(vec![2, 4, 4], 0.8, &mut rng));
        inputs.insert("k".to_string(), Tensor::uniform(vec![3, 2, 3, 3], 0.8, &mut rng));
        inputs.insert("b".to_string(), Tensor::uniform(vec![3], 0.8, &mut rng));
        let target = Tensor::uniform(vec![3, 4, 4], 0.8, &mut rng);
        assert_gradients_match(
            |tape, ids| {
                let c = tape.conv2d(ids["x"], ids["k"], ids["b"])?;
                let t = tape.tanh(c)?;
                let s = tape.sigmoid(t)?;
                let tgt = tape.constant(&target);
                tape.mse_loss(s, tgt)
            },
            &inputs,
            &GradCheckConfig::default(),
        );
    }

    #[test]
    fn detects_wrong_gradient_path() {
        // A loss whose build uses a *detached* copy of x for part of the
        // graph: the analytic gradient then misses that path and the
        // check must fail.
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::new(vec![2], vec![0.3, -0.2]).unwrap());
        let report = check_gradients(
            |tape, ids| {
                let x = ids["x"];
                let frozen = tape.value(x);
                let detached = tape.constant(&frozen);
                let y = tape.add(x, detached)?;
                let tgt = tape.constant(&Tensor::filled(vec![2], 1.0));
                tape.mse_loss(y, tgt)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}
