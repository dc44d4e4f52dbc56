//! Whole-library gradient verification suite.
//!
//! Runs central finite-difference checks (h = 1e-5, f64) against the
//! reverse-mode gradients of every differentiable operation group and the
//! end-to-end training loss, on miniature shapes. The harness also checks
//! itself: a deliberately wrong gradient must be detected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{fuse_stage, DecoderStageVars};
use crate::distill::{self, DistillConfig};
use crate::matching::{
    correlation, cross_attention_match, match_features, CorrelationMap, MatchingVars, NormVariant,
};
use crate::model::{forward, ModelState, TrainConfig};
use crate::pyramid::{self, StageBlockVars};
use crate::tape::{grad_check, GradCheckReport, Tape, Var};
use crate::tensor::{Result, Tensor};
use crate::{episodes, model};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub groups: Vec<GroupResult>,
    pub tol: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn group(
    name: &str,
    tol: f64,
    report: std::result::Result<GradCheckReport, crate::tensor::TensorError>,
) -> GroupResult {
    let err = report.map(|r| r.max_rel_err).unwrap_or(f64::INFINITY);
    GroupResult {
        group: name.to_string(),
        max_rel_err: err,
        passed: err < tol,
    }
}

fn sum_squares(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let sq = tape.hadamard(v, v)?;
    tape.sum_all(sq)
}

/// Run every gradient group; each check compares against central finite
/// differences at the given step.
pub fn run_suite(h: f64, tol: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut groups = Vec::new();

    groups.push(group(
        "elementwise",
        tol,
        grad_check(
            |tape, v| {
                let a = tape.add(v[0], v[1])?;
                let m = tape.hadamard(a, v[0])?;
                let r = tape.relu(m)?;
                let s = tape.scalar_mul(r, 1.3)?;
                let e = tape.exp(s)?;
                let l = tape.log(e)?; // exp then log keeps inputs positive
                let c = tape.concat(&[l, v[2]], 1)?;
                let t = tape.transpose(c)?;
                let rs = tape.reshape(t, &[2, 12])?;
                tape.mean_all(rs)
            },
            &[
                ("a", randt(&mut rng, &[4, 3])),
                ("b", randt(&mut rng, &[4, 3])),
                ("c", randt(&mut rng, &[4, 3])),
            ],
            h,
        ),
    ));

    groups.push(group(
        "matmul",
        tol,
        grad_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                let z = tape.linear(y, v[2], v[3])?;
                sum_squares(tape, z)
            },
            &[
                ("a", randt(&mut rng, &[3, 4])),
                ("b", randt(&mut rng, &[4, 3])),
                ("w", randt(&mut rng, &[3, 2])),
                ("bias", randt(&mut rng, &[2])),
            ],
            h,
        ),
    ));

    groups.push(group(
        "softmax",
        tol,
        grad_check(
            |tape, v| {
                let rows = tape.softmax(v[0], 1)?;
                let cols = tape.softmax(v[0], 0)?;
                let both = tape.hadamard(rows, cols)?;
                sum_squares(tape, both)
            },
            &[("x", randt(&mut rng, &[4, 5]))],
            h,
        ),
    ));

    groups.push(group(
        "l2_norm_rows",
        tol,
        grad_check(
            |tape, v| {
                let n = tape.l2_norm_rows(v[0])?;
                sum_squares(tape, n)
            },
            &[("x", randt(&mut rng, &[5, 3]).map(|x| x + 2.0))],
            h,
        ),
    ));

    groups.push(group(
        "layer_norm",
        tol,
        grad_check(
            |tape, v| {
                let y = tape.layer_norm_rows(v[0], v[1], v[2], 1e-6)?;
                sum_squares(tape, y)
            },
            &[
                ("x", randt(&mut rng, &[4, 5])),
                ("gamma", randt(&mut rng, &[5]).map(|x| x + 1.5)),
                ("beta", randt(&mut rng, &[5])),
            ],
            h,
        ),
    ));

    groups.push(group(
        "bilinear_resize",
        tol,
        grad_check(
            |tape, v| {
                let up = tape.bilinear_resize(v[0], 5, 7)?;
                let down = tape.bilinear_resize(up, 2, 2)?;
                sum_squares(tape, down)
            },
            &[("x", randt(&mut rng, &[2, 3, 4]))],
            h,
        ),
    ));

    groups.push(group(
        "avgpool",
        tol,
        grad_check(
            |tape, v| {
                let p = tape.avgpool2(v[0])?;
                sum_squares(tape, p)
            },
            &[("x", randt(&mut rng, &[2, 4, 4]))],
            h,
        ),
    ));

    groups.push(group(
        "cosine_correlation",
        tol,
        grad_check(
            |tape, v| {
                let c = tape.cosine_rows(v[0], v[1], 0.1)?;
                sum_squares(tape, c)
            },
            &[
                ("a", randt(&mut rng, &[4, 3])),
                ("b", randt(&mut rng, &[5, 3])),
            ],
            h,
        ),
    ));

    groups.push(group(
        "attention_block",
        tol,
        {
            let c = 3;
            let mut p = Vec::new();
            p.push(("x", randt(&mut rng, &[c, 2, 2])));
            p.push(("ln1_g", randt(&mut rng, &[c]).map(|x| x + 1.5)));
            p.push(("ln1_b", randt(&mut rng, &[c])));
            p.push(("wq", randt(&mut rng, &[c, c])));
            p.push(("wk", randt(&mut rng, &[c, c])));
            p.push(("wv", randt(&mut rng, &[c, c])));
            p.push(("wo", randt(&mut rng, &[c, c])));
            p.push(("ln2_g", randt(&mut rng, &[c]).map(|x| x + 1.5)));
            p.push(("ln2_b", randt(&mut rng, &[c])));
            p.push(("w1", randt(&mut rng, &[c, 2 * c])));
            p.push(("b1", randt(&mut rng, &[2 * c])));
            p.push(("w2", randt(&mut rng, &[2 * c, c])));
            p.push(("b2", randt(&mut rng, &[c])));
            grad_check(
                |tape, v| {
                    let vars = StageBlockVars {
                        ln1_gamma: v[1],
                        ln1_beta: v[2],
                        wq: v[3],
                        wk: v[4],
                        wv: v[5],
                        wo: v[6],
                        ln2_gamma: v[7],
                        ln2_beta: v[8],
                        mlp_w1: v[9],
                        mlp_b1: v[10],
                        mlp_w2: v[11],
                        mlp_b2: v[12],
                        down_w: None,
                        down_b: None,
                    };
                    let y = pyramid::self_attention_block(tape, v[0], &vars)?;
                    sum_squares(tape, y)
                },
                &p,
                h,
            )
        },
    ));

    groups.push(group(
        "matching",
        tol,
        {
            let c = 3;
            // full matching loss on 8x8 feature maps: features plus all
            // four weight matrices
            let prior = randt(&mut rng, &[8, 8]).map(|x| 0.5 * (x + 1.0));
            let p = vec![
                ("fq", randt(&mut rng, &[64, c])),
                ("fs", randt(&mut rng, &[64, c])),
                ("wq", randt(&mut rng, &[c, c])),
                ("wk", randt(&mut rng, &[c, c])),
                ("wv", randt(&mut rng, &[c, c])),
                ("wo", randt(&mut rng, &[c + 1, c])),
            ];
            grad_check(
                move |tape, v| {
                    let vars = MatchingVars {
                        wq: v[2],
                        wk: v[3],
                        wv: v[4],
                        wo: Some(v[5]),
                    };
                    let map = correlation(tape, v[0], v[1], &vars, 0.1, 0)?;
                    let x = match_features(
                        tape,
                        &map,
                        v[1],
                        &vars,
                        NormVariant::InverseSoftmax,
                        &prior,
                        (8, 8),
                        1,
                    )?;
                    sum_squares(tape, x)
                },
                &p,
                h,
            )
        },
    ));

    groups.push(group(
        "cross_attention",
        tol,
        {
            let c = 3;
            let p = vec![
                ("fq", randt(&mut rng, &[4, c])),
                ("fs", randt(&mut rng, &[3, c])),
                ("wq", randt(&mut rng, &[c, c])),
                ("wk", randt(&mut rng, &[c, c])),
                ("wv", randt(&mut rng, &[c, c])),
            ];
            grad_check(
                |tape, v| {
                    let vars = MatchingVars {
                        wq: v[2],
                        wk: v[3],
                        wv: v[4],
                        wo: None,
                    };
                    let (x, _) = cross_attention_match(tape, v[0], v[1], &vars, (2, 2), 0)?;
                    sum_squares(tape, x)
                },
                &p,
                h,
            )
        },
    ));

    groups.push(group(
        "distillation",
        tol,
        {
            let sels = vec![Tensor::<f64>::ones(vec![4]), Tensor::<f64>::ones(vec![4])];
            let mask = {
                let mut d = vec![0.0; 64];
                for i in [5, 6, 21, 40] {
                    d[i] = 1.0;
                }
                Tensor::from_vec(vec![8, 8], d).unwrap()
            };
            let cfg = DistillConfig::default();
            let hw = [(4usize, 4usize), (2, 2)];
            let p = vec![
                ("map0", randt(&mut rng, &[16, 4])),
                ("map1", randt(&mut rng, &[4, 4])),
            ];
            // teachers are detached: freeze them so the finite-difference
            // oracle differentiates the same function as the tape
            let teachers = {
                let mut tape = Tape::<f64>::new();
                let maps: Vec<CorrelationMap> = p
                    .iter()
                    .enumerate()
                    .map(|(stage, (_, t))| CorrelationMap {
                        values: tape.constant(t.clone()),
                        stage,
                    })
                    .collect();
                let students =
                    distill::student_distributions(&mut tape, &maps, &sels, &cfg).unwrap();
                distill::teacher_distributions(&tape, &students, &hw, &mask).unwrap()
            };
            grad_check(
                move |tape, v| {
                    let maps = vec![
                        CorrelationMap {
                            values: v[0],
                            stage: 0,
                        },
                        CorrelationMap {
                            values: v[1],
                            stage: 1,
                        },
                    ];
                    let students = distill::student_distributions(tape, &maps, &sels, &cfg)?;
                    distill::pair_loss_sum(tape, &students, &teachers, &cfg)
                },
                &p,
                h,
            )
        },
    ));

    groups.push(group(
        "decoder",
        tol,
        {
            let p = vec![
                ("x", randt(&mut rng, &[2, 4, 4])),
                ("coarse", randt(&mut rng, &[3, 2, 2])),
                ("proj_w", randt(&mut rng, &[3, 2])),
                ("proj_b", randt(&mut rng, &[2])),
                ("w1", randt(&mut rng, &[2, 2])),
                ("b1", randt(&mut rng, &[2])),
                ("w2", randt(&mut rng, &[2, 2])),
                ("b2", randt(&mut rng, &[2])),
            ];
            grad_check(
                |tape, v| {
                    let vars = DecoderStageVars {
                        proj_w: Some(v[2]),
                        proj_b: Some(v[3]),
                        mlp_w1: v[4],
                        mlp_b1: v[5],
                        mlp_w2: v[6],
                        mlp_b2: v[7],
                    };
                    let y = fuse_stage(tape, v[0], Some(v[1]), &vars, false)?;
                    sum_squares(tape, y)
                },
                &p,
                h,
            )
        },
    ));

    groups.push(group(
        "cross_entropy",
        tol,
        {
            let target = Tensor::<f64>::from_vec(
                vec![2, 2],
                vec![1.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
            grad_check(
                move |tape, v| tape.softmax_cross_entropy_pixels(v[0], &target),
                &[("logits", randt(&mut rng, &[2, 2, 2]))],
                h,
            )
        },
    ));

    groups.push(group("model_loss", tol, end_to_end_check(h)));

    // harness self-test: a deliberately wrong gradient must be flagged
    let selftest = grad_check(
        |tape, v| {
            let doubled = tape.scalar_mul(v[0], 2.0)?;
            let wrong = tape.detach(doubled); // silently drops the factor-2 path
            let back = tape.add(wrong, v[0])?;
            tape.sum_all(back)
        },
        &[("x", randt(&mut rng, &[3]))],
        h,
    );
    let detected = selftest.map(|r| r.max_rel_err >= tol).unwrap_or(false);
    groups.push(GroupResult {
        group: "harness_selftest".to_string(),
        max_rel_err: f64::NAN,
        passed: detected,
    });

    SuiteReport { groups, tol }
}

/// Finite-difference check of the full training objective on a miniature
/// model, over every learnable parameter entry. Two adjustments keep the
/// oracle honest: every parameter is jittered away from structural zeros
/// (a ReLU fed an exact 0 breaks central differences lawfully, not
/// erroneously), and the detached teacher distributions are captured once
/// and held fixed, since that is the function the tape differentiates.
fn end_to_end_check(
    h: f64,
) -> std::result::Result<GradCheckReport, crate::tensor::TensorError> {
    let cfg = TrainConfig {
        stages: 2,
        channels: vec![3, 4],
        image_hw: (16, 16),
        num_classes: 8,
        num_folds: 4,
        min_radius: 3.0,
        max_radius: 6.0,
        max_distractors: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut state = ModelState::<f64>::init(&cfg);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(0x71773);
    let jittered: Vec<Tensor<f64>> = state
        .params
        .flatten()
        .into_iter()
        .map(|(_, t)| {
            let noise = randt(&mut jitter_rng, t.shape());
            t.zip_map(&noise, "jitter", |a, b| a + 0.05 * b).unwrap()
        })
        .collect();
    state.params = model::ModelParams::from_flat(&state.params, jittered);
    let registry = cfg.registry();
    let split = cfg.fold_split();
    let episode =
        episodes::sample_episode(&registry, &split.train, &cfg.episode_config(1), 17).unwrap();

    // capture the teacher distributions at the base parameters
    let dcfg = DistillConfig::default();
    let teachers = {
        let mut tape = Tape::new();
        let (vars, _) = state.params.register(&mut tape, false);
        let fwd = forward(&mut tape, &vars, &state, &episode, &cfg).map_err(model_to_tensor)?;
        let students =
            distill::student_distributions(&mut tape, &fwd.maps, &fwd.stage_sels, &dcfg)?;
        distill::teacher_distributions(&tape, &students, &fwd.stage_hw, &episode.query_mask)?
    };

    let flat = state.params.flatten();
    let named: Vec<(&str, Tensor<f64>)> = flat
        .iter()
        .map(|(n, t)| (n.as_str(), t.clone()))
        .collect();
    grad_check(
        move |tape, v| {
            // rebuild the parameter container from the checked leaves
            let mut cursor = 0usize;
            let vars = rebuild_vars(&state.params, v, &mut cursor);
            let fwd = forward(tape, &vars, &state, &episode, &cfg).map_err(model_to_tensor)?;
            let ce = tape.softmax_cross_entropy_pixels(fwd.logits, &episode.query_mask)?;
            let students =
                distill::student_distributions(tape, &fwd.maps, &fwd.stage_sels, &dcfg)?;
            let kl = distill::pair_loss_sum(tape, &students, &teachers, &dcfg)?;
            let weighted = tape.scalar_mul(kl, cfg.lambda_distill)?;
            tape.add(ce, weighted)
        },
        &named,
        h,
    )
}

fn model_to_tensor(e: model::ModelError) -> crate::tensor::TensorError {
    match e {
        model::ModelError::Tensor(t) => t,
        other => panic!("unexpected model error in gradient check: {other}"),
    }
}

fn rebuild_vars(
    params: &model::ModelParams<f64>,
    leaves: &[Var],
    cursor: &mut usize,
) -> model::ModelVars {
    let mut next = |_: &Tensor<f64>| {
        let v = leaves[*cursor];
        *cursor += 1;
        v
    };
    let stages = params
        .stages
        .iter()
        .map(|p| StageBlockVars {
            ln1_gamma: next(&p.ln1_gamma),
            ln1_beta: next(&p.ln1_beta),
            wq: next(&p.wq),
            wk: next(&p.wk),
            wv: next(&p.wv),
            wo: next(&p.wo),
            ln2_gamma: next(&p.ln2_gamma),
            ln2_beta: next(&p.ln2_beta),
            mlp_w1: next(&p.mlp_w1),
            mlp_b1: next(&p.mlp_b1),
            mlp_w2: next(&p.mlp_w2),
            mlp_b2: next(&p.mlp_b2),
            down_w: p.down_w.as_ref().map(&mut next),
            down_b: p.down_b.as_ref().map(&mut next),
        })
        .collect();
    let matching = params
        .matching
        .iter()
        .map(|p| MatchingVars {
            wq: next(&p.wq),
            wk: next(&p.wk),
            wv: next(&p.wv),
            wo: p.wo.as_ref().map(&mut next),
        })
        .collect();
    let decoder = params
        .decoder
        .iter()
        .map(|p| DecoderStageVars {
            proj_w: p.proj_w.as_ref().map(&mut next),
            proj_b: p.proj_b.as_ref().map(&mut next),
            mlp_w1: next(&p.mlp_w1),
            mlp_b1: next(&p.mlp_b1),
            mlp_w2: next(&p.mlp_w2),
            mlp_b2: next(&p.mlp_b2),
        })
        .collect();
    let head = crate::decoder::HeadVars {
        w: next(&params.head.w),
        b: next(&params.head.b),
    };
    model::ModelVars {
        stages,
        matching,
        decoder,
        head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_clean_build() {
        let report = run_suite(DEFAULT_H, DEFAULT_TOL);
        for g in &report.groups {
            assert!(g.passed, "group {} failed: rel err {}", g.group, g.max_rel_err);
        }
    }
}
