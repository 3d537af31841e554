//! Central-difference gradient suite over every operator and composite
//! block, grouped by scope. Runs in `f64`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Drdb, DrdbConfig, IgHctb, Sam, SamConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheck, GradCheckReport};
use crate::hist_attention::{histogram_partition, AttentionConfig, DynamicRangeConv, GatedFfn, IgHsa, IgHtb};
use crate::kernels::ConvGeom;
use crate::model::{build_model, ModelConfig};
use crate::nn::ConvInit;
use crate::param::{perturb_all, ParamBuilder, ParamId, ParamStore};
use crate::retinex::Estimator;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{Direction, Permutation, Tensor};
use crate::training::{l1_loss, ms_ssim_loss, total_loss, LossWeights};

pub const SCOPES: [&str; 6] = ["tensor_nn", "hist_attention", "blocks", "retinex", "model", "training"];

/// Tolerance for individual operators and blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub scope: &'static str,
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

type Forward = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>;

/// Parameters (and inputs, stored as parameters so they are checked too) of one case.
struct Case {
    scope: &'static str,
    name: String,
    tolerance: f64,
    max_entries: Option<usize>,
    eps: f64,
    floor: f64,
    store: ParamStore<f64>,
    inputs: Vec<ParamId>,
    forward: Box<Forward>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Random values bounded away from zero, for operators with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let v: f64 = rng.random_range(0.3..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `y` to `sum(y ⊙ r)` with a fixed random `r`.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dims = tape.dims(y);
    let n = tape.value(y).len() as f64;
    let r = tape.input(away_from_zero(&mut rng, dims));
    let p = tape.mul(y, r)?;
    let m = tape.mean(p);
    Ok(tape.affine(m, n, 0.0))
}

fn op_case(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            store
                .insert(&format!("{name}.in{i}"), &t.dims(), t.data().to_vec())
                .expect("unique")
        })
        .collect();
    Case {
        scope: "tensor_nn",
        name: name.to_string(),
        tolerance: BLOCK_TOLERANCE,
        max_entries: None,
        eps: 1e-6,
        floor: 1e-8,
        store,
        inputs: ids,
        forward: Box::new(move |tape, _, xs| {
            let y = f(tape, xs)?;
            probe(tape, y, 1)
        }),
    }
}

fn operator_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let r = &mut rng;
    let d = [2, 3, 4, 5];
    let mut cases = vec![
        op_case(
            "conv2d",
            vec![
                rand_tensor(r, [2, 2, 5, 5], -1.0, 1.0),
                rand_tensor(r, [3, 2, 3, 3], -1.0, 1.0),
                rand_tensor(r, [1, 1, 1, 3], -1.0, 1.0),
            ],
            |t, x| t.conv2d(x[0], x[1], Some(x[2]), ConvGeom::new(1, 1, 1)),
        ),
        op_case(
            "conv2d_strided_dilated",
            vec![
                rand_tensor(r, [1, 4, 7, 6], -1.0, 1.0),
                rand_tensor(r, [4, 2, 3, 3], -1.0, 1.0),
            ],
            |t, x| {
                t.conv2d(
                    x[0],
                    x[1],
                    None,
                    ConvGeom {
                        stride: 2,
                        dilation: 2,
                        padding: 2,
                        groups: 2,
                    },
                )
            },
        ),
        op_case(
            "conv2d_depthwise",
            vec![
                rand_tensor(r, [2, 3, 6, 6], -1.0, 1.0),
                rand_tensor(r, [3, 1, 5, 5], -1.0, 1.0),
            ],
            |t, x| t.conv2d(x[0], x[1], None, ConvGeom::depthwise(3, 1, 2)),
        ),
        op_case(
            "add",
            vec![rand_tensor(r, d, -1.0, 1.0), rand_tensor(r, d, -1.0, 1.0)],
            |t, x| t.add(x[0], x[1]),
        ),
        op_case(
            "sub",
            vec![rand_tensor(r, d, -1.0, 1.0), rand_tensor(r, d, -1.0, 1.0)],
            |t, x| t.sub(x[0], x[1]),
        ),
        op_case(
            "mul",
            vec![rand_tensor(r, d, -1.0, 1.0), rand_tensor(r, d, -1.0, 1.0)],
            |t, x| t.mul(x[0], x[1]),
        ),
        op_case(
            "div",
            vec![rand_tensor(r, d, -1.0, 1.0), rand_tensor(r, d, 0.5, 2.0)],
            |t, x| t.div(x[0], x[1]),
        ),
        op_case(
            "mul_channel",
            vec![rand_tensor(r, d, -1.0, 1.0), rand_tensor(r, [2, 1, 4, 5], -1.0, 1.0)],
            |t, x| t.mul_channel(x[0], x[1]),
        ),
        op_case("affine", vec![rand_tensor(r, d, -1.0, 1.0)], |t, x| {
            Ok(t.affine(x[0], -1.7, 0.3))
        }),
        op_case("relu", vec![away_from_zero(r, d)], |t, x| Ok(t.relu(x[0]))),
        op_case("gelu", vec![rand_tensor(r, d, -3.0, 3.0)], |t, x| Ok(t.gelu(x[0]))),
        op_case(
            "sigmoid",
            vec![rand_tensor(r, d, -3.0, 3.0)],
            |t, x| Ok(t.sigmoid(x[0])),
        ),
        op_case("softplus", vec![rand_tensor(r, d, -3.0, 3.0)], |t, x| {
            Ok(t.softplus(x[0]))
        }),
        op_case("abs", vec![away_from_zero(r, d)], |t, x| Ok(t.abs(x[0]))),
        op_case("powf", vec![rand_tensor(r, d, 0.2, 2.0)], |t, x| t.powf(x[0], 0.7)),
        op_case(
            "layer_norm",
            vec![
                rand_tensor(r, d, -1.0, 1.0),
                rand_tensor(r, [1, 1, 1, 3], 0.5, 1.5),
                rand_tensor(r, [1, 1, 1, 3], -0.5, 0.5),
            ],
            |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5),
        ),
        op_case(
            "pixel_shuffle",
            vec![rand_tensor(r, [1, 8, 3, 2], -1.0, 1.0)],
            |t, x| t.pixel_shuffle(x[0], 2),
        ),
        op_case(
            "bilinear_resize_up",
            vec![rand_tensor(r, [1, 2, 3, 4], -1.0, 1.0)],
            |t, x| t.resize(x[0], 7, 5, false),
        ),
        op_case(
            "bilinear_resize_down",
            vec![rand_tensor(r, [1, 2, 8, 6], -1.0, 1.0)],
            |t, x| t.resize(x[0], 3, 4, true),
        ),
        op_case("softmax_channels", vec![rand_tensor(r, d, -2.0, 2.0)], |t, x| {
            Ok(t.softmax_channels(x[0]))
        }),
        op_case(
            "concat",
            vec![
                rand_tensor(r, [2, 1, 3, 3], -1.0, 1.0),
                rand_tensor(r, [2, 2, 3, 3], -1.0, 1.0),
            ],
            |t, x| t.concat(&[x[0], x[1], x[0]]),
        ),
        op_case("slice", vec![rand_tensor(r, [2, 5, 3, 3], -1.0, 1.0)], |t, x| {
            t.slice(x[0], 1, 3)
        }),
        op_case("channel_mean", vec![rand_tensor(r, d, -1.0, 1.0)], |t, x| {
            Ok(t.channel_mean(x[0]))
        }),
        op_case("mean", vec![rand_tensor(r, d, -1.0, 1.0)], |t, x| Ok(t.mean(x[0]))),
        op_case("mean_spatial", vec![rand_tensor(r, d, -1.0, 1.0)], |t, x| {
            Ok(t.mean_spatial(x[0]))
        }),
    ];
    let perms: Vec<Arc<Permutation>> = (0..6)
        .map(|i| {
            let mut f: Vec<usize> = (0..20).collect();
            f.rotate_left(i * 3 + 1);
            f.swap(0, 7);
            Arc::new(Permutation::from_forward(f).expect("bijection"))
        })
        .collect();
    let perms = Arc::new(perms);
    for (name, dir) in [
        ("gather_forward", Direction::Forward),
        ("gather_inverse", Direction::Inverse),
    ] {
        let p = perms.clone();
        cases.push(op_case(
            name,
            vec![rand_tensor(r, [2, 3, 4, 5], -1.0, 1.0)],
            move |t, x| t.gather(x[0], p.clone(), dir),
        ));
    }
    // Partitions come from a fixed key map so they stay constant under perturbation.
    let keys = rand_tensor(r, [1, 1, 6, 6], 0.0, 1.0);
    let parts: Vec<_> = (0..4)
        .map(|i| {
            let k: Vec<f64> = keys.data().iter().map(|v| (v + 0.37 * i as f64) % 1.0).collect();
            histogram_partition(&k, 3).expect("partition")
        })
        .collect();
    let parts = Arc::new(parts);
    let qkv = |r: &mut ChaCha8Rng| rand_tensor(r, [2, 4, 6, 6], -1.0, 1.0);
    let inputs = vec![qkv(r), qkv(r), qkv(r)];
    cases.push(op_case("hist_attention", inputs, move |t, x| {
        t.hist_attention(x[0], x[1], x[2], 2, parts.clone())
    }));
    cases
}

/// A composite block with perturbed (nonzero) parameters and random inputs.
fn block_case<B: 'static>(
    scope: &'static str,
    name: &str,
    seed: u64,
    input_dims: &[[usize; 4]],
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>,
    run: impl Fn(&B, &mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        build(&mut pb)?
    };
    perturb_all(&mut store, 0.2, &mut rng);
    let inputs = input_dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let t = rand_tensor(&mut rng, d, 0.0, 1.0);
            store.insert(&format!("input{i}"), &d, t.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Case {
        scope,
        name: name.to_string(),
        tolerance: BLOCK_TOLERANCE,
        max_entries: Some(6),
        // Composite losses are O(10); exact zeros (e.g. key biases under
        // softmax) only carry finite-difference noise, so the floor is raised.
        eps: 1e-5,
        floor: 1e-5,
        store,
        inputs,
        forward: Box::new(move |tape, store, xs| {
            let y = run(&block, tape, store, xs)?;
            probe(tape, y, seed)
        }),
    })
}

fn attention_cfg(channels: usize, heads: usize, bins: usize, illumination_mod: bool) -> AttentionConfig {
    AttentionConfig {
        heads,
        bins,
        channels,
        ffn_expansion: 2.0,
        illumination_mod,
    }
}

fn hist_attention_cases() -> Result<Vec<Case>> {
    let s = "hist_attention";
    let cfg = attention_cfg(4, 2, 3, true);
    Ok(vec![
        block_case(
            s,
            "dynamic_range_conv",
            1,
            &[[2, 4, 5, 5]],
            |pb| DynamicRangeConv::new(pb, "drc", 4, ConvInit::Fan),
            |b, t, st, x| b.forward(t, st, x[0]),
        )?,
        block_case(
            s,
            "ig_hsa",
            2,
            &[[1, 4, 6, 6], [1, 3, 6, 6]],
            |pb| IgHsa::new(pb, "hsa", &cfg, 3),
            |b, t, st, x| b.forward(t, st, x[0], x[1]),
        )?,
        block_case(
            s,
            "ig_hsa_no_illumination",
            3,
            &[[1, 4, 6, 6], [1, 3, 6, 6]],
            |pb| IgHsa::new(pb, "hsa", &attention_cfg(4, 1, 4, false), 3),
            |b, t, st, x| b.forward(t, st, x[0], x[1]),
        )?,
        block_case(
            s,
            "gated_ffn",
            4,
            &[[2, 4, 4, 4]],
            |pb| GatedFfn::new(pb, "ffn", 4, 2.0),
            |b, t, st, x| b.forward(t, st, x[0]),
        )?,
        block_case(
            s,
            "ig_htb",
            5,
            &[[1, 4, 6, 6], [1, 4, 6, 6]],
            |pb| IgHtb::new(pb, "htb", &cfg, 4),
            |b, t, st, x| b.forward(t, st, x[0], x[1]),
        )?,
    ])
}

fn blocks_cases() -> Result<Vec<Case>> {
    let s = "blocks";
    Ok(vec![
        block_case(
            s,
            "drdb",
            6,
            &[[1, 4, 6, 6]],
            |pb| Drdb::new(pb, "drdb", 4, &DrdbConfig::for_channels(4)),
            |b, t, st, x| b.forward(t, st, x[0]),
        )?,
        block_case(
            s,
            "sam",
            7,
            &[[1, 4, 8, 8]],
            |pb| Sam::new(pb, "sam", 4, &SamConfig::default()),
            |b, t, st, x| b.forward(t, st, x[0]),
        )?,
        block_case(
            s,
            "ig_hctb",
            8,
            &[[1, 4, 8, 8], [1, 4, 8, 8]],
            |pb| IgHctb::new(pb, "hctb", &attention_cfg(4, 2, 4, true), 4, true),
            |b, t, st, x| b.forward(t, st, x[0], x[1]),
        )?,
    ])
}

fn retinex_cases() -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (i, name) in ["estimator_r_bar", "estimator_l_bar", "estimator_guidance"]
        .into_iter()
        .enumerate()
    {
        cases.push(block_case(
            "retinex",
            name,
            9 + i as u64,
            &[[1, 3, 8, 8]],
            |pb| Estimator::new(pb, "est", 4, &[4, 6, 8], true),
            move |b, t, st, x| {
                let d = b.estimate(t, st, x[0])?;
                match i {
                    0 => Ok(d.r_bar.expect("heads on")),
                    1 => Ok(d.l_bar.expect("heads on")),
                    _ => {
                        let g: Vec<Var> = d.guidance.iter().map(|&g| t.mean_spatial(g)).collect();
                        t.concat(&g)
                    }
                }
            },
        )?);
    }
    Ok(cases)
}

fn model_cases() -> Result<Vec<Case>> {
    let mut model = build_model::<f64>(&ModelConfig::tiny(), 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    perturb_all(&mut model.store, 0.05, &mut rng);
    let x = rand_tensor(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
    let net = model.net.clone();
    let mut store = model.store;
    let input = store.insert("input0", &x.dims(), x.into_data())?;
    Ok(vec![Case {
        scope: "model",
        name: "full_tiny_model".into(),
        tolerance: MODEL_TOLERANCE,
        max_entries: Some(1),
        // Bin membership is piecewise constant; a small step stays inside one piece.
        eps: 1e-6,
        floor: 1e-5,
        store,
        inputs: vec![input],
        forward: Box::new(move |tape, store, xs| {
            let out = net.forward(tape, store, xs[0])?;
            let mut total = probe(tape, out.i_out, 23)?;
            for (k, &d) in out.deep_outputs.iter().enumerate().skip(1) {
                let p = probe(tape, d, 24 + k as u64)?;
                total = tape.add(total, p)?;
            }
            Ok(total)
        }),
    }])
}

fn training_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let target = rand_tensor(&mut rng, [1, 3, 22, 22], 0.0, 1.0);
    let pred = target.map(|v| (v + 0.3 * (v * 7.0).sin()).clamp(0.01, 0.99));
    let t2 = target.clone();
    let mut cases = vec![op_case(
        "l1_loss",
        vec![away_from_zero(&mut rng, [1, 2, 4, 4])],
        |t, x| {
            let z = t.input(Tensor::zeros([1, 2, 4, 4]));
            l1_loss(t, x[0], z)
        },
    )];
    let mut ms = op_case("ms_ssim_loss", vec![pred], move |t, x| {
        let y = t.input(t2.clone());
        ms_ssim_loss(t, x[0], y, 2)
    });
    // Per-pixel gradients of a mean over the image are small.
    ms.max_entries = Some(64);
    ms.eps = 1e-4;
    ms.floor = 1e-6;
    cases.push(ms);
    cases.push(block_case(
        "training",
        "total_loss_tiny_model",
        31,
        &[[1, 3, 24, 24]],
        |pb| Estimator::new(pb, "est", 4, &[4, 6, 8], true),
        move |b, t, st, x| {
            let d = b.estimate(t, st, x[0])?;
            let r = d.r_bar.expect("heads on");
            let l = d.l_bar.expect("heads on");
            let i_out = t.mul(r, l)?;
            let coarse = t.mul(i_out, x[0])?;
            let out = crate::model::ForwardOutputs {
                i_out,
                decomposition: d,
                branch: None,
                deep_r: Vec::new(),
                deep_l: Vec::new(),
                deep_outputs: vec![i_out, coarse],
            };
            let y = t.input(Tensor::full([1, 3, 24, 24], 0.5));
            let w = LossWeights {
                msssim_scales: 1,
                ..LossWeights::default()
            };
            Ok(total_loss(t, &out, y, &w)?.total)
        },
    )?);
    for c in cases.iter_mut() {
        c.scope = "training";
    }
    Ok(cases)
}

fn cases_for(scope: &str) -> Result<Vec<Case>> {
    match scope {
        "tensor_nn" => Ok(operator_cases()),
        "hist_attention" => hist_attention_cases(),
        "blocks" => blocks_cases(),
        "retinex" => retinex_cases(),
        "model" => model_cases(),
        "training" => training_cases(),
        "all" => {
            let mut v = Vec::new();
            for s in SCOPES {
                v.extend(cases_for(s)?);
            }
            Ok(v)
        }
        other => Err(Error::invalid(
            "gradient suite",
            format!("unknown scope {other:?}; expected all or one of {}", SCOPES.join(", ")),
        )),
    }
}

/// Runs every case of `scope` (`all` or a module name). `fault` corrupts one
/// operator's gradient rule to show the suite detects it.
pub fn gradient_suite(
    scope: &str,
    fault: Option<OpKind>,
    mut on_case: impl FnMut(&CaseResult),
) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for mut case in cases_for(scope)? {
        let cfg = GradCheck {
            eps: case.eps,
            floor: case.floor,
            max_entries_per_param: case.max_entries,
            fault,
        };
        let params: Vec<ParamId> = case.store.ids().collect();
        let inputs = case.inputs.clone();
        let forward = &case.forward;
        let report = grad_check(&mut case.store, &params, &cfg, |tape, store| {
            let xs: Vec<Var> = inputs.iter().map(|&id| tape.param(store, id)).collect();
            forward(tape, store, &xs)
        })?;
        let r = CaseResult {
            scope: case.scope,
            name: case.name,
            tolerance: case.tolerance,
            report,
        };
        on_case(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_kind_is_covered() {
        let mut seen = std::collections::HashSet::new();
        for case in operator_cases() {
            let mut tape = Tape::<f64>::new();
            let xs: Vec<Var> = case.inputs.iter().map(|&id| tape.param(&case.store, id)).collect();
            (case.forward)(&mut tape, &case.store, &xs).unwrap();
            seen.extend(OpKind::ALL.into_iter().filter(|&k| tape.op_count(k) > 0));
        }
        for kind in OpKind::ALL {
            if kind != OpKind::Input {
                assert!(seen.contains(&kind), "{kind:?} not exercised");
            }
        }
    }

    #[test]
    fn operators_pass_and_fault_is_named() {
        let results = gradient_suite("tensor_nn", None, |_| {}).unwrap();
        for r in &results {
            assert!(r.passed(), "{} {:?}", r.name, r.report);
        }
        let faulty = gradient_suite("tensor_nn", Some(OpKind::Gelu), |_| {}).unwrap();
        let failed: Vec<&str> = faulty.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["gelu"]);
    }

    #[test]
    fn unknown_scope() {
        assert!(gradient_suite("nope", None, |_| {}).is_err());
    }
}
