//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//!
//! A criterion whose checks fail makes the run exit nonzero. One that
//! passes its checks but overruns its time budget is printed as FAIL too,
//! but only fails the run when `IVCF_ACCEPTANCE_STRICT=1`: budgets are
//! wall-clock and depend on the machine.
//!
//! `IVCF_ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.
//! Criterion 11 needs the public-use study files:
//! `IVCF_OREGON_CSV` (data) and `IVCF_OREGON_SCHEMA` (schema JSON).

use std::time::Instant;

use ivcf_core::aggregate::{compute_dr_scores_late, gate, histogram_bins, itt_scores, stratum_propensity};
use ivcf_core::dataset::{Comparison, SubgroupSpec};
use ivcf_core::forest::{
    forest_weights, grow_forest, variable_importance, ForestInput, Node, SplitRule, TreeParams,
};
use ivcf_core::ivforest::{fit_iv_forest, solve_local_moment, IvSplit};
use ivcf_core::linear::{fit_2sls, Controls};
use ivcf_core::policy::{allocate_capacity, learn_policy_tree_columns};
use ivcf_core::synth::{
    brute_force_policy_oracle, generate, ClusterSizes, Compliance, DgpSpec, EffectFn, Noise,
};
use ivcf_core::ObservationFrame;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

// 1. Local moment solver against a direct 2x2 solve; Wald ratio.
fn moment_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut solved = 0;
    while solved < 1000 {
        let n = rng.random_range(4..30);
        let alpha: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let z: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let d: Vec<f64> = z.iter().map(|&zi| f64::from(rng.random_bool(0.15 + 0.6 * zi))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = |f: &dyn Fn(usize) -> f64| (0..n).map(|i| alpha[i] * f(i)).sum::<f64>();
        let a = Matrix2::new(s(&|_| 1.0), s(&|i| d[i]), s(&|i| z[i]), s(&|i| z[i] * d[i]));
        let b = Vector2::new(s(&|i| y[i]), s(&|i| z[i] * y[i]));
        let Ok((tau, mu)) = solve_local_moment(&alpha, &y, &d, &z) else {
            continue;
        };
        let direct = a.lu().solve(&b).expect("identified system");
        let err = ((tau - direct[1]).abs() / (1.0 + direct[1].abs())).max((mu - direct[0]).abs() / (1.0 + direct[0].abs()));
        worst = worst.max(err);
        solved += 1;
    }
    let mut wald_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(10..200);
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let d: Vec<f64> = z.iter().map(|&zi| f64::from(rng.random_bool(0.1 + 0.7 * zi))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let by = |v: &[f64], want: f64| {
            let s: Vec<f64> = v.iter().zip(&z).filter(|(_, &zi)| zi == want).map(|(a, _)| *a).collect();
            mean(&s)
        };
        let dd = by(&d, 1.0) - by(&d, 0.0);
        if dd.abs() < 1e-6 {
            continue;
        }
        let wald = (by(&y, 1.0) - by(&y, 0.0)) / dd;
        let (tau, _) = solve_local_moment(&vec![1.0; n], &y, &d, &z).unwrap();
        wald_err = wald_err.max((tau - wald).abs() / (1.0 + wald.abs()));
    }
    outcome(
        worst <= 1e-10 && wald_err <= 1e-12,
        format!("max rel err vs 2x2 solve {worst:.1e} (tol 1e-10); vs Wald ratio {wald_err:.1e} (tol 1e-12)"),
    )
}

// 2. 2SLS against residualised closed form.
fn two_sls_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut fitted = 0;
    while fitted < 100 {
        let n = rng.random_range(60..600);
        let levels = rng.random_range(1..5);
        let strata: Vec<u32> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        let z: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let d: Vec<f64> = z.iter().map(|&zi| f64::from(rng.random_bool(0.2 + 0.5 * zi))).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.4 * d[i] + 0.3 * f64::from(strata[i]) + rng.random_range(-1.0..1.0))
            .collect();
        let frame = ObservationFrame::from_parts(ivcf_core::dataset::FrameParts {
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            cluster_labels: (0..n).map(|i| (i / 3).to_string()).collect(),
            outcome_name: "y".into(),
            outcome: y.clone(),
            treatment: Some(d.clone()),
            instrument: z.clone(),
            covariate_names: vec![],
            covariates: vec![],
            strata: vec![("s".into(), strata.iter().map(|c| c.to_string()).collect())],
            weights: None,
        })
        .unwrap();
        let Ok(fit) = fit_2sls(&frame, Controls::Strata) else {
            continue;
        };
        // exogenous block: intercept and indicators of present levels but the first
        let mut present: Vec<u32> = strata.clone();
        present.sort_unstable();
        present.dedup();
        let w = DMatrix::from_fn(n, present.len(), |i, j| {
            if j == 0 {
                1.0
            } else {
                f64::from(strata[i] == present[j])
            }
        });
        let wtw = (w.transpose() * &w).try_inverse().unwrap();
        let resid = |v: &[f64]| {
            let v = DVector::from_column_slice(v);
            &v - &w * (&wtw * (w.transpose() * &v))
        };
        let (zt, dt, yt) = (resid(&z), resid(&d), resid(&y));
        let beta = zt.dot(&yt) / zt.dot(&dt);
        worst = worst.max((fit.coefficient - beta).abs());
        fitted += 1;
    }
    outcome(worst <= 1e-8, format!("max abs diff vs residualised IV {worst:.1e} over 100 designs (tol 1e-8)"))
}

// 3. Exact policy search against enumeration.
fn policy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    for inst in 0..50 {
        let n = rng.random_range(10..=200);
        let p = rng.random_range(1..=3);
        let discrete = inst % 2 == 0;
        let x: Vec<Vec<f64>> = (0..p)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if discrete {
                            f64::from(rng.random_range(0..8u8))
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) + 0.1).collect();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let depth = if inst % 5 == 0 { 1 } else { 2 };
        let tree = learn_policy_tree_columns(&x, &names, &r, depth).unwrap();
        let oracle = brute_force_policy_oracle(&x, &r, depth).unwrap();
        if tree.objective != oracle {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 50 instances differ from brute force (exact equality)"))
}

// 4. Top-K allocation.
fn allocation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut set_mismatch = 0;
    let mut beaten = 0;
    for inst in 0..100 {
        let n = if inst == 99 {
            50_000
        } else {
            10f64.powf(rng.random_range(1.0..4.7)) as usize
        };
        let k = rng.random_range(1..=n);
        // coarse grid so that ties at the cut occur
        let r: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-50..50i32)) / 8.0).collect();
        let a = allocate_capacity(&r, k).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| r[j].partial_cmp(&r[i]).unwrap().then(i.cmp(&j)));
        let mut oracle = order[..k].to_vec();
        oracle.sort_unstable();
        let oracle_obj: f64 = oracle.iter().map(|&i| r[i]).sum();
        if oracle != a.treated || oracle_obj != a.objective || a.treated.len() != k {
            set_mismatch += 1;
        }
        for _ in 0..1000 {
            let s: f64 = index::sample(&mut rng, n, k).iter().map(|i| r[i]).sum();
            if s > a.objective + 1e-9 {
                beaten += 1;
            }
        }
    }
    outcome(
        set_mismatch == 0 && beaten == 0,
        format!("{set_mismatch} of 100 differ from the sort oracle; {beaten} random subsets beat the optimum"),
    )
}

fn step_spec(seed: u64) -> DgpSpec {
    DgpSpec {
        n: 20_000,
        p: 5,
        effect: EffectFn::Step { height: 0.5 },
        compliance: Compliance {
            always_takers: 0.1,
            never_takers: 0.5,
            compliers: 0.4,
        },
        noise: Noise::Gaussian { scale: 1.0 },
        clusters: ClusterSizes::UniformUpTo { max: 3 },
        instrument_rates: vec![0.5],
        seed,
        ..Default::default()
    }
}

// 5. LATE recovery on the step design.
fn late_recovery() -> Outcome {
    let reps = 50;
    let params = TreeParams {
        n_trees: 1000,
        ..Default::default()
    };
    let mut late_err = Vec::new();
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for rep in 0..reps {
        let data = generate(&step_spec(5000 + rep)).unwrap();
        let model = fit_iv_forest(&data.frame, &params, true).unwrap();
        let scores = compute_dr_scores_late(&model, &data.frame).unwrap();
        late_err.push(scores.estimate - data.truth.late);
        let x1 = data.frame.covariate("x1").unwrap();
        let region = |want: bool| {
            let v: Vec<f64> = model
                .oob
                .iter()
                .zip(x1)
                .filter(|(_, &x)| (x > 0.0) == want)
                .map(|(e, _)| e.tau_hat)
                .collect();
            mean(&v)
        };
        neg.push(region(false));
        pos.push(region(true));
    }
    let bias = mean(&late_err);
    let (m0, m1) = (mean(&neg), mean(&pos));
    outcome(
        bias.abs() < 0.02 && m0.abs() <= 0.05 && (m1 - 0.5).abs() <= 0.05,
        format!(
            "LATE bias {bias:+.4} (|.| < 0.02, MC-SE {:.4}); region ITE means {m0:+.3} / {m1:+.3} (within 0.05 of 0 / 0.5)",
            sd(&late_err) / (reps as f64).sqrt()
        ),
    )
}

// 6. Coverage of nominal 95% intervals.
fn coverage() -> Outcome {
    let reps = 500;
    let tau = 0.3;
    let points: Vec<Vec<f64>> = vec![
        vec![0.0, 0.0, 0.0],
        vec![0.5, -0.5, 0.2],
        vec![-0.5, 0.5, -0.2],
        vec![0.3, 0.3, 0.7],
        vec![-0.7, -0.2, 0.4],
    ];
    // desk-scale forest; with a few hundred trees the debiased variance is
    // floored in a sizeable share of fits and the intervals collapse
    let params = TreeParams::default();
    let mut covered = 0;
    let mut total = 0;
    for rep in 0..reps {
        let spec = DgpSpec {
            n: 2000,
            p: 3,
            effect: EffectFn::Constant { value: tau },
            compliance: Compliance {
                always_takers: 0.1,
                never_takers: 0.4,
                compliers: 0.5,
            },
            seed: 6000 + rep,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let model = fit_iv_forest(&data.frame, &params, true).unwrap();
        for e in model.predict_points(&points).unwrap() {
            total += 1;
            if e.ci_low <= tau && tau <= e.ci_high {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    outcome(
        (0.90..=0.97).contains(&rate),
        format!("empirical coverage {rate:.3} over {total} intervals (target [0.90, 0.97])"),
    )
}

// 7. Double robustness of the ITT scores.
fn double_robustness() -> Outcome {
    let reps = 100;
    let mut shuffled_m = Vec::new();
    let mut wrong_e = Vec::new();
    let mut truth = 0.0;
    for rep in 0..reps {
        let spec = DgpSpec {
            n: 5000,
            p: 3,
            baseline_intercept: 1.0,
            baseline_slope: 1.0,
            instrument_rates: vec![0.3, 0.7],
            clusters: ClusterSizes::UniformUpTo { max: 3 },
            seed: 7000 + rep,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(70_000 + rep);
        let data = generate(&spec).unwrap();
        let f = &data.frame;
        let t = &data.truth;
        truth = t.itt;
        let (e, _) = stratum_propensity(f);
        let mut perm: Vec<usize> = (0..f.n_rows()).collect();
        perm.shuffle(&mut rng);
        let m0: Vec<f64> = perm.iter().map(|&i| t.m0[i]).collect();
        let m1: Vec<f64> = perm.iter().map(|&i| t.m1[i]).collect();
        shuffled_m.push(mean(&itt_scores(f.outcome(), f.instrument(), &e, &m0, &m1)));
        let x1 = f.covariate("x1").unwrap();
        let bad_e: Vec<f64> = x1.iter().map(|&x| if x > 0.0 { 0.8 } else { 0.25 }).collect();
        wrong_e.push(mean(&itt_scores(f.outcome(), f.instrument(), &bad_e, &t.m0, &t.m1)));
    }
    let check = |v: &[f64]| {
        let bias = mean(v) - truth;
        let mcse = sd(v) / (v.len() as f64).sqrt();
        (bias.abs() < 3.0 * mcse, bias, mcse)
    };
    let (ok_a, ba, sa) = check(&shuffled_m);
    let (ok_b, bb, sb) = check(&wrong_e);
    outcome(
        ok_a && ok_b,
        format!(
            "shuffled outcome model: bias {ba:+.4} vs 3 MC-SE {:.4}; wrong propensity: bias {bb:+.4} vs 3 MC-SE {:.4}",
            3.0 * sa,
            3.0 * sb
        ),
    )
}

struct Mean<'a>(&'a [f64]);

impl SplitRule for Mean<'_> {
    fn pseudo_outcomes(&self, rows: &[u32], out: &mut Vec<f64>) -> bool {
        out.clear();
        out.extend(rows.iter().map(|&r| self.0[r as usize]));
        true
    }
}

// 8. Structural invariants as properties.
fn structural() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 48,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        20usize..300,
        1usize..5,
        1u32..4,
        1usize..4,
        1usize..12,
        any::<u64>(),
        any::<bool>(),
        any::<bool>(),
    );
    let result = runner.run(&strategy, |(n, p, max_hh, bag, mns, seed, iv, by_cluster)| {
        let mns = mns.min(n / 4).max(1);
        let spec = DgpSpec {
            n,
            p,
            clusters: ClusterSizes::UniformUpTo { max: max_hh },
            seed,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let f = &data.frame;
        let input = ForestInput::from_frame(f);
        let params = TreeParams {
            n_trees: 8,
            bag_size: bag,
            min_node_size: mns,
            cluster_sampling: by_cluster,
            seed,
            ..Default::default()
        };
        let (y, d, z) = (f.outcome(), f.treatment().unwrap(), f.instrument());
        let grow = || {
            if iv {
                grow_forest(&input, &IvSplit { y, d, z }, &params)
            } else {
                grow_forest(&input, &Mean(y), &params)
            }
        };
        let model = grow().unwrap();
        prop_assert_eq!(&model, &grow().unwrap(), "same seed, different forest");
        let clusters = f.cluster_ids();
        for tree in &model.trees {
            let mut split = tree.split_rows.clone();
            let mut est = tree.estimation_rows.clone();
            split.sort_unstable();
            est.sort_unstable();
            prop_assert!(split.iter().all(|r| est.binary_search(r).is_err()), "halves overlap");
            let drawn: std::collections::HashSet<u32> = tree.subsample().collect();
            let in_split: std::collections::HashSet<u32> = split.iter().map(|&r| clusters[r as usize]).collect();
            let in_est: std::collections::HashSet<u32> = est.iter().map(|&r| clusters[r as usize]).collect();
            if by_cluster {
                for r in 0..n as u32 {
                    let c = clusters[r as usize];
                    if in_split.contains(&c) || in_est.contains(&c) {
                        prop_assert!(drawn.contains(&r), "household split by subsampling");
                    }
                }
                prop_assert!(in_split.is_disjoint(&in_est), "household in both halves");
            }
            for node in &tree.nodes {
                if let Node::Leaf { samples } = node {
                    prop_assert!(!samples.is_empty(), "empty leaf survived pruning");
                }
            }
        }
        for k in 0..3 {
            let x: Vec<f64> = f.row((k * 7919) % n);
            let alpha = forest_weights(&model, &x).unwrap();
            prop_assert!(alpha.iter().all(|&a| a >= 0.0));
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "48 random configurations: honesty, households, pruning, weights, determinism"),
        Err(e) => outcome(false, format!("{e}")),
    }
}

// 9. Variable importance finds the single signal.
fn importance() -> Outcome {
    let reps = 50;
    let params = TreeParams {
        n_trees: 200,
        ..Default::default()
    };
    let mut first = 0;
    for rep in 0..reps {
        let spec = DgpSpec {
            n: 4000,
            p: 5,
            effect: EffectFn::Step { height: 1.0 },
            compliance: Compliance {
                always_takers: 0.1,
                never_takers: 0.4,
                compliers: 0.5,
            },
            seed: 9000 + rep,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let model = fit_iv_forest(&data.frame, &params, true).unwrap();
        let imp = variable_importance(&model.forest, 4);
        let top = (0..imp.len()).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        if top == 0 {
            first += 1;
        }
    }
    let share = first as f64 / reps as f64;
    outcome(share >= 0.95, format!("signal ranked first in {first} of {reps} replications (need >= 95%)"))
}

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// 10. Freedman-Diaconis widths and trimming.
fn histogram_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    let mut count_errors = 0;
    for _ in 0..200 {
        let n = rng.random_range(50..5000);
        let scale = rng.random_range(0.01..10.0);
        let v: Vec<f64> = (0..n).map(|_| scale * (rng.random::<f64>() - 0.3).powi(3)).collect();
        let h = histogram_bins(&v, None, 0.005).unwrap();
        let k = (0.005 * n as f64).floor() as usize;
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let kept = &s[k..n - k];
        let m = kept.len();
        let width = 2.0 * (type7(kept, 0.75) - type7(kept, 0.25)) / (m as f64).cbrt();
        worst = worst.max((h.bin_width - width).abs() / width);
        if h.n_retained != n - 2 * k || h.counts.iter().sum::<usize>() != n - 2 * k {
            count_errors += 1;
        }
    }
    outcome(
        worst <= 1e-12 && count_errors == 0,
        format!("max rel width error {worst:.1e} (tol 1e-12); {count_errors} trimming count errors"),
    )
}

// 11. Replication on the public-use study files.
fn oregon() -> Option<Outcome> {
    let csv = std::env::var("IVCF_OREGON_CSV").ok()?;
    let schema = std::env::var("IVCF_OREGON_SCHEMA").ok()?;
    let trees: usize = std::env::var("IVCF_OREGON_TREES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2000);
    let paper_scale = trees >= TreeParams::PAPER_SCALE_TREES;
    let tol = if paper_scale { 0.02 } else { 0.03 };
    let schema = match ivcf_core::Schema::from_json_file(&schema) {
        Ok(s) => s,
        Err(e) => return Some(outcome(false, format!("schema: {e}"))),
    };
    let frame = match ObservationFrame::load_csv(&csv, &schema) {
        Ok((f, _)) => f,
        Err(e) => return Some(outcome(false, format!("data: {e}"))),
    };
    let run = || -> ivcf_core::Result<Outcome> {
        let lin = fit_2sls(&frame, Controls::Strata)?;
        let params = TreeParams {
            n_trees: trees,
            ..Default::default()
        };
        let model = fit_iv_forest(&frame, &params, true)?;
        let scores = compute_dr_scores_late(&model, &frame)?;
        let share = model.oob.iter().filter(|e| e.sig10 && e.tau_hat > 0.0).count() as f64 / frame.n_rows() as f64;
        let male = std::env::var("IVCF_OREGON_MALE").unwrap_or_else(|_| "female==0".into());
        let male = SubgroupSpec::parse(&male)
            .unwrap_or_else(|_| SubgroupSpec::new("male", "female", Comparison::Eq, 0.0));
        let g = gate(&scores, &male.mask(&frame)?, &male.name)?;
        let checks = [
            (lin.coefficient - 0.069).abs() <= 0.005,
            (lin.se - 0.024).abs() <= 0.003,
            (scores.estimate - 0.045).abs() <= tol,
            (share - 0.142).abs() <= 0.03,
            (g.gate - 0.10).abs() <= 0.03,
        ];
        Ok(outcome(
            checks.iter().all(|&c| c),
            format!(
                "linear {:.3} (se {:.3}); forest LATE {:.3}; sig10+ share {:.3}; male GATE {:.3}; {trees} trees (policy-tree layout is checked by the CLI run)",
                lin.coefficient, lin.se, scores.estimate, share, g.gate
            ),
        ))
    };
    Some(run().unwrap_or_else(|e| outcome(false, format!("error: {e}"))))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("IVCF_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    type Criterion = (usize, &'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "moment-solver exactness", 5.0, moment_solver),
        (2, "2SLS algebra", 30.0, two_sls_algebra),
        (3, "policy-tree oracle equivalence", 120.0, policy_oracle),
        (4, "allocation optimality", 60.0, allocation),
        (5, "LATE recovery", 600.0, late_recovery),
        (6, "CI coverage", 1200.0, coverage),
        (7, "double robustness", 600.0, double_robustness),
        (8, "structural invariants", 120.0, structural),
        (9, "variable importance signal", 300.0, importance),
        (10, "histogram rule", 5.0, histogram_rule),
    ];
    let strict = std::env::var("IVCF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut over_budget = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs <= budget;
        if !o.pass {
            failed += 1;
        } else if !in_time {
            over_budget += 1;
        }
        println!(
            "{} [{id}] {name}: {} [{secs:.1}s, budget {budget:.0}s{}]",
            if o.pass && in_time { "PASS" } else { "FAIL" },
            o.detail,
            if in_time { "" } else { ", over budget" }
        );
    }
    if only.as_ref().is_none_or(|o| o.contains(&11)) {
        let start = Instant::now();
        match oregon() {
            None => println!("SKIP [11] study-data replication: IVCF_OREGON_CSV / IVCF_OREGON_SCHEMA not set"),
            Some(o) => {
                if !o.pass {
                    failed += 1;
                }
                println!(
                    "{} [11] study-data replication: {} [{:.1}s]",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.detail,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
    if over_budget > 0 {
        eprintln!("{over_budget} acceptance criteria passed their checks but overran the time budget");
    }
    if failed > 0 || (strict && over_budget > 0) {
        eprintln!("{failed} acceptance criteria failed their checks");
        std::process::exit(1);
    }
}
