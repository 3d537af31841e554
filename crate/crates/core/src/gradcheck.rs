//! Central-difference verification of the tape's gradient rules.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor of the relative error, for entries whose true
    /// gradient is near zero.
    pub floor: f64,
    /// Corrupts one gradient rule on the analytic pass (fault-injection fixture).
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_entries_per_param: None,
            floor: 1e-8,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len && m > 0 => {
            if m == 1 {
                return vec![0];
            }
            (0..m).map(|i| i * (len - 1) / (m - 1)).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Maximum over checked entries of `|analytic - cd| / max(|analytic|, |cd|, floor)`.
///
/// `f` must rebuild the scalar loss from scratch on the given tape.
pub fn grad_check<F>(store: &mut ParamStore<f64>, params: &[ParamId], cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&cfg.eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside [1e-6, 1e-4]", cfg.eps),
        ));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss);
        if v.len() != 1 || !v.data()[0].is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check loss".into(),
            });
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    tape.inject_fault(cfg.fault);
    let loss = f(&mut tape, store)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check loss".into(),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<(ParamId, Option<Vec<f64>>)> = params
        .iter()
        .map(|&id| {
            let g = tape
                .params()
                .find(|&(pid, _)| pid == id)
                .and_then(|(_, var)| tape.grad(var))
                .map(|g| g.data().to_vec());
            (id, g)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (id, grad) in analytic {
        let len = store.get(id).numel();
        for i in sample_indices(len, cfg.max_entries_per_param) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let cd = (plus? - minus?) / (2.0 * cfg.eps);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(cfg.floor);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Like [`grad_check`], differentiating with respect to input tensors, which
/// `f` receives as gradient-carrying tape leaves.
pub fn grad_check_inputs<F>(inputs: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(&format!("input{i}"), &t.dims(), t.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    grad_check(&mut store, &ids.clone(), cfg, |tape, s| {
        let xs: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &xs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ConvGeom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = specs
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                store.insert(name, shape, data).unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn conv_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, ids) = random_store(&mut rng, &[("x", &[1, 2, 4, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])]);
        let report = grad_check(&mut store, &ids.clone(), &GradCheck::default(), |t, s| {
            let x = t.param(s, ids[0]);
            let w = t.param(s, ids[1]);
            let b = t.param(s, ids[2]);
            let y = t.conv2d(x, w, Some(b), ConvGeom::new(1, 1, 1))?;
            let y2 = t.mul(y, y)?;
            Ok(t.mean(y2))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut store, ids) = random_store(
            &mut rng,
            &[("x", &[1, 4, 3, 3]), ("g", &[4]), ("b", &[4]), ("r", &[1, 4, 3, 3])],
        );
        let report = grad_check(&mut store, &ids[..3], &GradCheck::default(), |t, s| {
            let x = t.param(s, ids[0]);
            let g = t.param(s, ids[1]);
            let b = t.param(s, ids[2]);
            let r = t.input(s.value(ids[3]).clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let y = t.mul(y, r)?;
            Ok(t.mean(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn dead_parameter_has_exact_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.insert("used", &[2], vec![0.5, -0.25]).unwrap();
        let dead = store.insert("dead", &[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _d = tape.param(&store, dead);
        let sq = tape.mul(u, u).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert!(store.get(dead).grad.data().iter().all(|&g| g == 0.0));
        let report = grad_check(&mut store, &[dead], &GradCheck::default(), |t, s| {
            let u = t.param(s, used);
            let sq = t.mul(u, u)?;
            Ok(t.mean(sq))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn fault_injection_is_detected() {
        let mut store = ParamStore::new();
        let x = store.insert("x", &[3], vec![0.3, -0.7, 1.2]).unwrap();
        let f = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = t.param(s, x);
            let g = t.gelu(v);
            Ok(t.mean(g))
        };
        let clean = grad_check(&mut store, &[x], &GradCheck::default(), f).unwrap();
        assert!(clean.max_rel_error < 1e-6);
        let faulty = GradCheck {
            fault: Some(OpKind::Gelu),
            ..GradCheck::default()
        };
        assert!(grad_check(&mut store, &[x], &faulty, f).unwrap().max_rel_error > 0.1);
    }

    #[test]
    fn eps_range_enforced() {
        let mut store = ParamStore::new();
        let x = store.insert("x", &[1], vec![1.0]).unwrap();
        let cfg = GradCheck {
            eps: 1e-2,
            ..GradCheck::default()
        };
        assert!(grad_check(&mut store, &[x], &cfg, |t, s| Ok(t.param(s, x))).is_err());
    }
}
