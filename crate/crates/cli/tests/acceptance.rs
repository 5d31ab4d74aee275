//! Acceptance suite: unit-level properties, parameter arithmetic and the
//! directional desk-scale experiments. One PASS/FAIL line per criterion is
//! written straight to stderr so it shows up without `--nocapture`.
//!
//! The experiment runs live under `CARGO_TARGET_TMPDIR/acceptance` and are
//! rebuilt on every invocation (about 20 minutes on one core).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pemma_cli::bundle::{read_entries, Bundle, BASE_CKPT, DELTA_CKPT};
use pemma_cli::outputs::{read_metrics, MetricRow, METRICS_CSV};
use pemma_cli::train::evaluate;
use pemma_cli::{execute, Overrides, RunRecord, Stage};
use pemma_core::adaptation::{
    add_pet_paths, adapter_forward, dora_weight, early_fusion_ledger, inject_adapters, late_fusion_ledger,
    pemma_ledger, row_norms, skip_combine, AdaptationConfig, DoraForm, PetInit,
};
use pemma_core::backbone::{predict_case, Graph, Model, ModelConfig, PrognosisConfig, PrognosisHead, Stem};
use pemma_core::data::nifti::{encode_nifti, parse_nifti, Endian, NiftiDatatype, WriteOptions};
use pemma_core::data::{
    generate_phantom, preprocess_intensities, read_nifti, write_nifti, Case, Manifest, Modality, Mode, Part,
    PhantomSpec, Volume, EHR_FEATURE_DIM,
};
use pemma_core::fusion::{late_fusion_combine, FusionWeights, LateFusion, MaskProbabilities};
use pemma_core::objectives::{
    antolini_cindex, deephit_loss, dice_ce_loss, discretize_times, DeepHitConfig, SurvivalRecord,
};
use pemma_core::tensor::{finite_difference_check, ParamGroup, Rng, Tape, Tensor};
use pemma_core::Error;

const SEEDS: [u64; 3] = [1, 2, 3];
const METHODS: [&str; 2] = ["pemma_lora", "pemma_dora"];
/// Adaptation learning rate for the 200-step desk budget.
const ADAPT_LR: f64 = 1e-2;
const GRAD_TOL: f64 = 1e-4;

struct Verdict {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict(id: usize, title: &'static str, passed: bool, detail: String) -> Verdict {
    let v = Verdict { id, title, passed, detail };
    say(&line(&v));
    v
}

fn line(v: &Verdict) -> String {
    format!("[{}] {:>2}. {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail)
}

fn tiny() -> ModelConfig {
    ModelConfig {
        side: 16,
        patch: 8,
        dim: 16,
        heads: 2,
        depth: 4,
        mlp_ratio: 2,
        classes: 3,
        dec_channels: 4,
        skip_channels: 4,
        head_hidden: 8,
    }
}

// ---------------------------------------------------------------- 1

/// Worst relative error of each differentiable piece over 20 seeds.
fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut record = |name: &'static str, r: pemma_core::Result<f64>| match r {
        Ok(e) => {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
        Err(e) => failures.push(format!("{name}: {e}")),
    };

    for (label, adapt) in [("attention+lora", AdaptationConfig::default()), ("attention+dora", AdaptationConfig::dora())] {
        let adapt = AdaptationConfig { rank: 2, ..adapt };
        let mut model: Model<f64> = Model::new(tiny(), Stem::Uni { modality: Modality::Ct }, &mut Rng::new(5)).unwrap();
        inject_adapters(&mut model, &adapt, &mut Rng::new(6)).unwrap();
        let (n, d) = (tiny().tokens(), tiny().dim);
        for seed in 0..20u64 {
            let mut rng = Rng::new(100 + seed);
            for p in model.params.iter_mut().filter(|p| p.group == ParamGroup::Peft) {
                if p.name.ends_with("lora_b") {
                    p.value = Tensor::randn(p.value.shape().to_vec(), 0.3, &mut rng);
                }
            }
            let tokens = Tensor::<f64>::randn([n, d], 1.0, &mut rng);
            let up = Tensor::<f64>::randn([n, d], 1.0, &mut rng);
            let objective = |bound: Option<&str>| {
                let model = &model;
                let tokens = tokens.clone();
                let up = up.clone();
                let bound = bound.map(str::to_string);
                move |tape: &mut Tape<f64>, x| {
                    let mut g = Graph::new(tape, &model.params, false);
                    let input = match &bound {
                        Some(name) => {
                            g.bind(name.clone(), x);
                            g.tape.constant(tokens.clone())
                        }
                        None => x,
                    };
                    let h = model.encoder(&mut g, input)?;
                    let u = g.tape.constant(up.clone());
                    let y = g.tape.mul(h[h.len() - 1], u)?;
                    g.tape.sum(y)
                }
            };
            record(label, finite_difference_check(objective(None), &tokens, 1e-5));
            let mut names = vec!["blocks.0.attn.q.lora_a", "blocks.2.attn.v.lora_b"];
            if label.ends_with("dora") {
                names.push("blocks.1.attn.q.dora_m");
            }
            for name in names {
                let x = model.params.tensor(name).unwrap().clone();
                record(label, finite_difference_check(objective(Some(name)), &x, 1e-5));
            }
        }
    }

    for seed in 0..20u64 {
        let mut rng = Rng::new(300 + seed);
        let labels: Vec<u8> = (0..48).map(|_| rng.below(3) as u8).collect();
        let logits = Tensor::<f64>::randn([48, 3], 1.5, &mut rng);
        record(
            "dice_ce",
            finite_difference_check(|t, x| Ok(dice_ce_loss(t, x, &labels, &[1.0, 1.0, 1.0])?.total), &logits, 1e-5),
        );

        let times: Vec<f64> = (0..10).map(|_| 1.0 + 60.0 * rng.uniform()).collect();
        let (_, bins) = discretize_times(&times, 5).unwrap();
        let records: Vec<SurvivalRecord> = times
            .iter()
            .zip(&bins)
            .map(|(&time, &b)| SurvivalRecord {
                time,
                event: rng.uniform() < 0.5,
                bin: Some(b),
            })
            .collect();
        let z = Tensor::<f64>::randn([10, 5], 1.0, &mut rng);
        record(
            "deephit",
            finite_difference_check(
                |t, x| {
                    let pmf = t.softmax(x, 1)?;
                    Ok(deephit_loss(t, pmf, &records, &DeepHitConfig::default())?.total)
                },
                &z,
                1e-5,
            ),
        );

        let zc = Tensor::<f64>::randn([20, 4], 1.0, &mut rng);
        let zp = Tensor::<f64>::randn([20, 4], 1.0, &mut rng);
        let up = Tensor::<f64>::randn([20, 4], 1.0, &mut rng);
        let beta = Tensor::scalar(rng.normal());
        let weigh = |t: &mut Tape<f64>, z| {
            let u = t.constant(up.clone());
            let y = t.mul(z, u)?;
            t.sum(y)
        };
        record(
            "skip_combine",
            finite_difference_check(
                |t, b| {
                    let (c, p) = (t.constant(zc.clone()), t.constant(zp.clone()));
                    let z = skip_combine(t, c, p, b)?;
                    weigh(t, z)
                },
                &beta,
                1e-5,
            ),
        );
        record(
            "skip_combine",
            finite_difference_check(
                |t, p| {
                    let (c, b) = (t.constant(zc.clone()), t.constant(beta.clone()));
                    let z = skip_combine(t, c, p, b)?;
                    weigh(t, z)
                },
                &zp,
                1e-5,
            ),
        );
    }

    let mut pemma: Model<f64> = Model::new(tiny(), Stem::Uni { modality: Modality::Ct }, &mut Rng::new(7)).unwrap();
    add_pet_paths(&mut pemma, PetInit::Random, &mut Rng::new(8)).unwrap();
    for seed in 0..20u64 {
        let mut rng = Rng::new(500 + seed);
        let x0 = Tensor::<f64>::randn([12, 1], 1.0, &mut rng);
        let up = Tensor::<f64>::randn([12, 2], 1.0, &mut rng);
        for name in ["adapter.weight", "adapter.bias"] {
            let w0 = Tensor::<f64>::randn(pemma.params.tensor(name).unwrap().shape().to_vec(), 1.0, &mut rng);
            record(
                "adapter",
                finite_difference_check(
                    |t, w| {
                        let mut g = Graph::new(t, &pemma.params, false);
                        g.bind(name, w);
                        let x = g.tape.constant(x0.clone());
                        let y = adapter_forward(&mut g, x)?;
                        let y = g.tape.gelu(y)?;
                        let u = g.tape.constant(up.clone());
                        let y = g.tape.mul(y, u)?;
                        g.tape.sum(y)
                    },
                    &w0,
                    1e-5,
                ),
            );
        }

        let config = PrognosisConfig {
            hidden: 8,
            bins: 5,
            use_ehr: true,
        };
        let head = PrognosisHead::<f64>::new(6, config, &mut rng).unwrap();
        let pooled = Tensor::<f64>::randn([6, 6], 1.0, &mut rng);
        let ehr = Tensor::<f64>::randn([6, EHR_FEATURE_DIM], 1.0, &mut rng);
        let records: Vec<SurvivalRecord> = (0..6)
            .map(|i| SurvivalRecord {
                time: 5.0 + i as f64,
                event: i % 2 == 0,
                bin: Some(i % 5),
            })
            .collect();
        for name in ["prog.fc1.weight", "prog.fc2.bias"] {
            let x = head.params.tensor(name).unwrap().clone();
            record(
                "prognosis_head",
                finite_difference_check(
                    |t, w| {
                        let mut g = Graph::new(t, &head.params, false);
                        g.bind(name, w);
                        let p = g.tape.constant(pooled.clone());
                        let e = g.tape.constant(ehr.clone());
                        let pmf = head.forward(&mut g, p, Some(e))?;
                        Ok(deephit_loss(g.tape, pmf, &records, &DeepHitConfig::default())?.total)
                    },
                    &x,
                    1e-5,
                ),
            );
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let passed = failures.is_empty() && max < GRAD_TOL && secs < 60.0 && worst.len() == 7;
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let mut detail = format!("max rel err {max:.2e} ({}) in {secs:.1} s", per.join(", "));
    if !failures.is_empty() {
        detail.push_str(&format!("; errors: {}", failures.join("; ")));
    }
    verdict(1, "finite-difference gradients", passed, detail)
}

// ---------------------------------------------------------------- 2

fn random_cases(n: u64, side: usize) -> Vec<Case> {
    let spec = PhantomSpec {
        side,
        ..Default::default()
    };
    (0..n)
        .map(|i| {
            let mut c = generate_phantom(9_000 + i, &spec, "Z").unwrap();
            preprocess_intensities(&mut c).unwrap();
            c
        })
        .collect()
}

fn logits_bits(model: &Model<f32>, case: &Case, mode: Mode) -> Vec<u32> {
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &model.params);
    let pet = case.pet.as_ref().map(|v| v.data.as_slice());
    let out = model.forward(&mut g, Some(&case.ct.data), pet, mode).unwrap();
    tape.value(out.logits).iter().map(|x| x.to_bits()).collect()
}

fn zero_delta(base_dir: &Path) -> Verdict {
    let cases = random_cases(10, 32);
    let start = Instant::now();
    let base = match Bundle::load(base_dir).unwrap() {
        Bundle::Single(m) => m,
        Bundle::Late(_) => unreachable!(),
    };
    let reference: Vec<Vec<u32>> = cases.iter().map(|c| logits_bits(&base, c, Mode::Ct)).collect();
    let mut mismatches = Vec::new();
    for (label, cfg) in [("lora", AdaptationConfig::default()), ("dora", AdaptationConfig::dora())] {
        let mut m = base.clone();
        add_pet_paths(&mut m, PetInit::CrossModal, &mut Rng::new(3)).unwrap();
        inject_adapters(&mut m, &cfg, &mut Rng::new(4)).unwrap();
        let beta = m.params.tensor("skip.beta").unwrap().data()[0];
        let b_zero = m
            .params
            .iter()
            .filter(|p| p.name.ends_with("lora_b"))
            .all(|p| p.value.data().iter().all(|&v| v == 0.0));
        if beta != 0.0 || !b_zero {
            mismatches.push(format!("{label}: adapters not at zero delta"));
        }
        for (i, c) in cases.iter().enumerate() {
            if logits_bits(&m, c, Mode::Ct) != reference[i] {
                mismatches.push(format!("{label} case {i}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = mismatches.is_empty() && secs < 10.0;
    let detail = if mismatches.is_empty() {
        format!("10 cases x {{lora, dora}} bit-identical in mode ct, {secs:.1} s")
    } else {
        format!("differences: {}; {secs:.1} s", mismatches.join(", "))
    };
    verdict(2, "zero-delta identity", passed, detail)
}

// ---------------------------------------------------------------- 3

fn freeze_invariance(work: &Path) -> Verdict {
    let pre = work.join("s1/base");
    let pre_bundle = Bundle::load(&pre).unwrap();
    let pre_model = pre_bundle.single().unwrap();
    let pre_digest = pre_model.params.digest(|p| p.group == ParamGroup::Base);
    let pre_entries = read_entries(&pre.join(BASE_CKPT)).unwrap();
    let mut problems = Vec::new();
    let mut steps_seen = Vec::new();
    for method in METHODS {
        let name = format!("s1/freeze_{method}");
        let rec = run(
            work,
            Stage::Adapt,
            &name,
            &format!("seed = 1\nfrom = \"s1/base\"\nmethod = \"{method}\"\n[train]\nlr = {ADAPT_LR}\nsteps = 100\n"),
        );
        let dir = work.join(&name);
        let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
        steps_seen.push(log.lines().count() - 1);
        let adapted = Bundle::load(&dir).unwrap();
        let model = adapted.single().unwrap();
        if model.params.digest(|p| p.group == ParamGroup::Base) != pre_digest {
            problems.push(format!("{method}: base digest changed"));
        }
        if rec.base_digest.as_deref() != Some(pre_digest.as_str()) {
            problems.push(format!("{method}: recorded digest differs"));
        }
        let after = read_entries(&dir.join(BASE_CKPT)).unwrap();
        let same = after.len() == pre_entries.len()
            && after.iter().zip(&pre_entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits()))
            });
        if !same {
            problems.push(format!("{method}: base checkpoint entries differ"));
        }
        let delta = read_entries(&dir.join(DELTA_CKPT)).unwrap();
        let moved = delta
            .iter()
            .filter(|e| e.name.ends_with("lora_b") || e.name == "skip.beta")
            .any(|e| e.data.iter().any(|&v| v != 0.0));
        if !moved {
            problems.push(format!("{method}: trainable parameters never moved"));
        }
    }
    let passed = problems.is_empty() && steps_seen.iter().all(|&s| s == 100);
    let detail = if passed {
        format!("base hash {} unchanged after 100 steps (lora, dora)", &pre_digest[..12])
    } else {
        format!("steps {steps_seen:?}; {}", problems.join("; "))
    };
    verdict(3, "freeze invariance", passed, detail)
}

// ---------------------------------------------------------------- 4

fn ledgers() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (label, cfg) in [("desk", ModelConfig::desk()), ("reference", ModelConfig::reference_geometry())] {
        let late = late_fusion_ledger(&cfg);
        ok &= late.total() == 2 * late.base_total;
        let early = early_fusion_ledger(&cfg);
        let added = early.total() - early.base_total;
        let expect = cfg.patch.pow(3) * cfg.dim + cfg.skip_channels;
        ok &= added == expect;
        notes.push(format!("{label}: late {}x, early +{added}", late.total() as f64 / late.base_total as f64));
    }
    let full = ModelConfig::reference_geometry();
    let adapt = AdaptationConfig {
        rank: 8,
        alpha: 16.0,
        ..AdaptationConfig::default()
    };
    let pemma = pemma_ledger(&full, &adapt);
    let early = early_fusion_ledger(&full);
    let fp = pemma.trainable() as f64 / pemma.total() as f64;
    let fe = early.trainable() as f64 / early.total() as f64;
    ok &= fp <= 0.10 && fp < fe;
    notes.push(format!("PEMMA r=8 trainable {fp:.4} vs early {fe:.4}"));
    verdict(4, "parameter ledger arithmetic", ok, notes.join("; "))
}

// ---------------------------------------------------------------- 5

fn dora_magnitude() -> Verdict {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (out, inp) = (1 + rng.below(8), 1 + rng.below(8));
        let r = 1 + rng.below(4);
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::randn([out, inp], 1.0, &mut rng));
        let a = tape.constant(Tensor::randn([r, inp], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn([out, r], 1.0, &mut rng));
        let m_val: Vec<f64> = (0..out).map(|_| 0.1 + 3.0 * rng.uniform()).collect();
        let m = tape.constant(Tensor::new([out], m_val.clone()).unwrap());
        let s = 0.1 + 4.0 * rng.uniform();
        let wp = dora_weight(&mut tape, w, a, b, m, s, DoraForm::Canonical).unwrap();
        let n = row_norms(&mut tape, wp).unwrap();
        for (x, y) in tape.value(n).iter().zip(&m_val) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(5, "DoRA magnitude preservation", worst <= 1e-6, format!("1000 draws, max |‖W'‖ - m| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 6

fn late_fusion() -> Verdict {
    let cfg = ModelConfig::desk();
    let ct: Model<f32> = Model::new(cfg, Stem::Uni { modality: Modality::Ct }, &mut Rng::new(61)).unwrap();
    let pet: Model<f32> = Model::new(cfg, Stem::Uni { modality: Modality::Pet }, &mut Rng::new(62)).unwrap();
    let cases: Vec<Case> = Manifest::desk_default().cases("E", Part::Test, true).unwrap().into_iter().take(2).collect();
    let bits = |m: &MaskProbabilities| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut ok = true;
    let mut worst_row = 0.0f64;
    let mut rng = Rng::new(63);
    for case in &cases {
        let mc = predict_case(&ct, case, Mode::Ct).unwrap();
        let mp = predict_case(&pet, case, Mode::Pet).unwrap();
        ok &= bits(&late_fusion_combine(&mc, &mp, FusionWeights::new(1.0).unwrap()).unwrap()) == bits(&mc);
        ok &= bits(&late_fusion_combine(&mc, &mp, FusionWeights::new(0.0).unwrap()).unwrap()) == bits(&mp);
        for _ in 0..5 {
            let w = FusionWeights::new(rng.uniform()).unwrap();
            worst_row = worst_row.max(late_fusion_combine(&mc, &mp, w).unwrap().max_row_error());
        }
        let pair = LateFusion::new(ct.clone(), pet.clone(), FusionWeights::new(1.0).unwrap()).unwrap();
        ok &= bits(&pair.predict(case, Mode::CtPet).unwrap()) == bits(&mc);
    }
    let passed = ok && worst_row <= 1e-6;
    verdict(
        6,
        "late-fusion endpoints",
        passed,
        format!("endpoints exact: {ok}; max row-sum error {worst_row:.1e}"),
    )
}

// ---------------------------------------------------------------- 7

/// Pair enumeration written independently of the library.
fn brute_cindex(surv: &[Vec<f64>], times: &[f64], events: &[bool], bins: &[usize]) -> Option<f64> {
    let (mut pairs, mut concordant, mut ties) = (0u64, 0u64, 0u64);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if i == j || !events[i] || times[i] >= times[j] {
                continue;
            }
            pairs += 1;
            let (a, b) = (surv[i][bins[i]], surv[j][bins[i]]);
            if a < b {
                concordant += 1;
            } else if a == b {
                ties += 1;
            }
        }
    }
    (pairs > 0).then(|| (concordant as f64 + 0.5 * ties as f64) / pairs as f64)
}

fn curves_from(scores: &[f64], k: usize) -> Vec<Vec<f64>> {
    // higher score, lower survival at every bin
    scores.iter().map(|s| (0..k).map(|b| (-(s + 1.0) * (b + 1) as f64 / k as f64).exp()).collect()).collect()
}

fn cindex_oracle() -> Verdict {
    let mut rng = Rng::new(77);
    let mut agree = 0;
    let mut mismatched = Vec::new();
    let (mut perfect, mut anti) = (true, true);
    for inst in 0..50 {
        let n = 2 + rng.below(19);
        let k = 2 + rng.below(6);
        // integer times make ties in time possible
        let times: Vec<f64> = (0..n).map(|_| (1 + rng.below(30)) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        let bins: Vec<usize> = times.iter().map(|t| ((t - 1.0) as usize * k / 30).min(k - 1)).collect();
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|i| SurvivalRecord {
                time: times[i],
                event: events[i],
                bin: Some(bins[i]),
            })
            .collect();
        // coarse random curves so that prediction ties occur
        let surv: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut s = 1.0;
                (0..k)
                    .map(|_| {
                        s -= (rng.below(3) as f64) * 0.1;
                        s.max(0.0)
                    })
                    .collect()
            })
            .collect();
        let ours = antolini_cindex(&surv, &records).ok().map(|c| c.value);
        let theirs = brute_cindex(&surv, &times, &events, &bins);
        if ours.map(f64::to_bits) == theirs.map(f64::to_bits) {
            agree += 1;
        } else {
            mismatched.push(format!("#{inst}: {ours:?} vs {theirs:?}"));
        }

        // risk ordered by time: shortest time gets the highest score
        if theirs.is_some() {
            let scores: Vec<f64> = times.iter().map(|t| 100.0 - t).collect();
            let c = antolini_cindex(&curves_from(&scores, k), &records).unwrap().value;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = antolini_cindex(&curves_from(&neg, k), &records).unwrap().value;
            perfect &= c == 1.0;
            anti &= a == 0.0;
        }
    }
    let passed = agree == 50 && perfect && anti;
    let mut detail = format!("{agree}/50 instances identical; perfect -> 1: {perfect}; anti -> 0: {anti}");
    if !mismatched.is_empty() {
        detail.push_str(&format!("; {}", mismatched.join(", ")));
    }
    verdict(7, "C-index oracle", passed, detail)
}

// ---------------------------------------------------------------- 8

fn quantile_bins() -> Verdict {
    let mut rng = Rng::new(488);
    let times: Vec<f64> = (0..488).map(|_| 0.5 + 120.0 * rng.uniform()).collect();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let distinct = sorted.len() == 488;
    let (_, bins) = discretize_times(&times, 20).unwrap();
    let mut counts = vec![0usize; 20];
    for b in bins {
        counts[b] += 1;
    }
    let passed = distinct && counts.iter().all(|&c| c == 24 || c == 25);
    verdict(8, "quantile discretization", passed, format!("n=488, 20 bins, counts {counts:?}"))
}

// ---------------------------------------------------------------- 9-11

fn write_config(work: &Path, name: &str, body: &str) -> PathBuf {
    let path = work.join(format!("{}.toml", name.replace('/', "_")));
    std::fs::write(&path, format!("schema_version = 1\nout = \"{name}\"\n{body}")).unwrap();
    path
}

fn run(work: &Path, stage: Stage, name: &str, body: &str) -> RunRecord {
    let cfg = write_config(work, name, body);
    execute(stage, &cfg, &Overrides::default()).unwrap_or_else(|e| panic!("{stage:?} {name}: {e}"))
}

fn metrics(dir: &Path) -> Vec<MetricRow> {
    read_metrics(&dir.join(METRICS_CSV)).unwrap()
}

fn metric(rows: &[MetricRow], center: &str, mode: &str, class: &str, name: &str) -> f64 {
    rows.iter()
        .find(|r| r.center == center && r.mode == mode && r.class == class && r.metric == name)
        .unwrap_or_else(|| panic!("no {name} for {center}/{mode}/{class}"))
        .value
}

fn adaptation_benefit(work: &Path) -> Verdict {
    let mut lines = Vec::new();
    let mut passed = true;
    for seed in SEEDS {
        let base = format!("s{seed}/base");
        let pre = run(work, Stage::Pretrain, &base, &format!("seed = {seed}\n"));
        let ev = format!("s{seed}/base_eval");
        run(work, Stage::Eval, &ev, &format!("seed = {seed}\nfrom = \"{base}\"\nmodes = [\"ct\"]\n"));
        let baseline = metric(&metrics(&work.join(&ev)), "E", "ct", "average", "dice");
        for method in METHODS {
            let name = format!("s{seed}/{method}");
            let rec = run(
                work,
                Stage::Adapt,
                &name,
                &format!("seed = {seed}\nfrom = \"{base}\"\nmethod = \"{method}\"\n[train]\nlr = {ADAPT_LR}\n"),
            );
            let adapted = metric(&metrics(&work.join(&name)), "E", "ctpet", "average", "dice");
            let arm = pre.wall_clock_s + rec.wall_clock_s;
            let ok = adapted - baseline >= 0.15 && arm <= 300.0;
            passed &= ok;
            lines.push(format!(
                "s{seed} {}: {adapted:.3} vs {baseline:.3} ({:.0}+{:.0} s){}",
                &method[6..],
                pre.wall_clock_s,
                rec.wall_clock_s,
                if ok { "" } else { " FAIL" }
            ));
        }
    }
    verdict(9, "synthetic adaptation benefit", passed, lines.join("; "))
}

fn continual(work: &Path) -> Verdict {
    let manifest = Manifest::desk_default();
    let test = manifest.cases("E", Part::Test, true).unwrap();
    let mut lines = Vec::new();
    let mut passed = true;
    for method in METHODS {
        let from = format!("s1/{method}");
        let name = format!("s1/{method}+F");
        run(
            work,
            Stage::Continual,
            &name,
            &format!("seed = 1\nfrom = \"{from}\"\nscope = \"peft_only\"\n[continual]\ncenter = \"F\"\ntrain_modes = \"ct\"\n"),
        );
        let before_rows = metrics(&work.join(&from));
        let before = metric(&before_rows, "E", "ctpet", "average", "dice");
        let after = metric(&metrics(&work.join(&name)), "E", "ctpet", "average", "dice");
        let drop = before - after;

        // put the saved adaptation deltas back into the fine-tuned model
        let mut model = match Bundle::load(&work.join(&name)).unwrap() {
            Bundle::Single(m) => m,
            Bundle::Late(_) => unreachable!(),
        };
        let deltas = read_entries(&work.join(&from).join(DELTA_CKPT)).unwrap();
        model.params.apply_entries(&deltas, false).unwrap();
        let original = Bundle::load(&work.join(&from)).unwrap();
        let same_weights = model.params.digest(|_| true) == original.single().unwrap().params.digest(|_| true);
        let modes = model.arch.modes();
        let table = evaluate(&Bundle::Single(model), &test, &modes).unwrap();
        let mut exact = same_weights;
        for (mode, d) in &table["E"] {
            for (class, v) in [("tumor", d.tumor), ("lymph", d.lymph), ("average", d.average)] {
                exact &= metric(&before_rows, "E", mode.tag(), class, "dice").to_bits() == v.to_bits();
            }
        }
        let ok = drop < 0.05 && exact;
        passed &= ok;
        lines.push(format!(
            "{}: ctpet {before:.4} -> {after:.4} (drop {drop:.4}), restore exact: {exact}",
            &method[6..]
        ));
    }
    verdict(10, "continual anti-forgetting", passed, lines.join("; "))
}

fn prognosis(work: &Path) -> Verdict {
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let name = format!("s{seed}/prognosis");
        run(work, Stage::Prognosis, &name, &format!("seed = {seed}\nfrom = \"s{seed}/pemma_lora\"\n"));
        let rows = metrics(&work.join(&name));
        let c = |s: &str, m: &str| metric(&rows, "S", s, "survival", m);
        let (ct, cp, cpt) = (c("ct", "cindex"), c("cp", "cindex"), c("cpt", "cindex"));
        let untrained = ["ct", "cp", "cpt"].map(|s| c(s, "cindex_untrained"));
        let trend = cpt >= cp && cp >= ct && cpt - ct >= 0.05;
        let chance = untrained.iter().all(|u| (u - 0.5).abs() <= 0.1);
        if trend && chance {
            wins += 1;
        }
        lines.push(format!(
            "s{seed}: CT {ct:.3} CP {cp:.3} CPT {cpt:.3}, untrained {:.3}/{:.3}/{:.3}{}",
            untrained[0],
            untrained[1],
            untrained[2],
            if trend && chance { "" } else { " (miss)" }
        ));
    }
    verdict(11, "prognosis trend", wins >= 2, format!("{wins}/3 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 12

fn nifti() -> Verdict {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/nifti");
    let files: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".nii") || n.ends_with(".nii.gz"))
        .collect();
    let mut problems = Vec::new();
    let ramp_f32: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let ramp_i16: Vec<f32> = (0..24).map(|i| (i * 7 - 80) as f32).collect();
    let scaled: Vec<f32> = ramp_i16.iter().map(|v| v * 2.0 - 1.0).collect();
    for (name, want) in [
        ("le_float32.nii", &ramp_f32),
        ("be_float32.nii", &ramp_f32),
        ("le_float32_extension.nii", &ramp_f32),
        ("le_int16.nii", &ramp_i16),
        ("be_int16.nii", &ramp_i16),
        ("le_int16_scaled.nii", &scaled),
        ("be_int16_scaled.nii", &scaled),
    ] {
        match read_nifti(dir.join(name), Modality::Ct) {
            Ok(v) if v.dims == [4, 3, 2] && &v.data == want => {}
            Ok(_) => problems.push(format!("{name}: wrong content")),
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    let mut malformed = 0;
    for name in files.iter().filter(|n| n.starts_with("bad_")) {
        match read_nifti(dir.join(name), Modality::Pet) {
            Err(Error::Nifti(_)) => malformed += 1,
            other => problems.push(format!("{name}: {:?}", other.map(|v| v.dims))),
        }
    }

    let tmp = std::env::temp_dir().join(format!("pemma-nifti-{}", std::process::id()));
    std::fs::create_dir_all(&tmp).unwrap();
    let mut rng = Rng::new(12);
    for i in 0..20 {
        let dims = [1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)];
        let data: Vec<f32> = (0..dims.iter().product()).map(|_| (rng.normal() * 1e3) as f32).collect();
        let v = Volume::new(dims, [0.7, 1.0, 2.0], Modality::Pet, data).unwrap();
        let path = tmp.join(format!("{i}.nii"));
        write_nifti(&path, &v).unwrap();
        let back = read_nifti(&path, Modality::Pet).unwrap();
        let be = encode_nifti(&v, WriteOptions { endian: Endian::Big, datatype: NiftiDatatype::Float32 }).unwrap();
        let from_be = parse_nifti(&be, Modality::Pet).unwrap();
        let same = |a: &Volume| a.dims == v.dims && a.data.iter().map(|x| x.to_bits()).eq(v.data.iter().map(|x| x.to_bits()));
        if !same(&back) || !same(&from_be) {
            problems.push(format!("round trip {i}"));
        }
    }
    let _ = std::fs::remove_dir_all(&tmp);
    let passed = problems.is_empty() && files.len() >= 12 && malformed >= 5;
    let mut detail = format!("{} corpus files, {malformed} malformed rejected, 20 round trips", files.len());
    if !problems.is_empty() {
        detail.push_str(&format!("; {}", problems.join("; ")));
    }
    verdict(12, "NIfTI-1 reader and writer", passed, detail)
}

#[test]
fn acceptance() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).unwrap();

    let mut results = vec![
        gradients(),
        ledgers(),
        dora_magnitude(),
        late_fusion(),
        cindex_oracle(),
        quantile_bins(),
        nifti(),
    ];
    results.push(adaptation_benefit(&work));
    results.push(zero_delta(&work.join("s1/base")));
    results.push(freeze_invariance(&work));
    results.push(continual(&work));
    results.push(prognosis(&work));
    results.sort_by_key(|v| v.id);

    say("\n---- acceptance summary ----");
    for v in &results {
        say(&line(v));
    }
    let failed: Vec<String> = results.iter().filter(|v| !v.passed).map(|v| format!("{}. {}", v.id, v.title)).collect();
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
