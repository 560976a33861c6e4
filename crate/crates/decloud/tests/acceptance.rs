//! Acceptance gate: one test per criterion, each printing `AC-n PASS` or
//! `AC-n FAIL` (run with `--nocapture` to see the lines). The heavyweight
//! end-to-end criteria (AC-7, AC-8) train real models and dominate the
//! runtime; everything else finishes in seconds.

use decloud::diffusion::{
    evaluate, guided_step, remove_clouds, train, DiffusionSchedule, SampleConfig, TrainConfig,
    TrainEnable,
};
use decloud::grouping::{group_corpus, kmeans, make_stage_plan, StagePlan};
use decloud::imagery::{load_image, Image};
use decloud::lora::LoraAdapter;
use decloud::metrics::{
    complexity_score, gram_matrix, mse, psnr, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
use decloud::net::{FreeUParams, PromptCondition, UNet, UNetConfig};
use decloud::synthcloud::{gen_corpus, CloudType, Split};
use decloud::tensor::{grad_check, grad_check_store, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Minimum improvement of restored over cloudy thin-split PSNR the
/// end-to-end run must reach, pinned from the pilot (which measured
/// ~+2.7 dB for the reference schedule below).
const PINNED_MARGIN_DB: f64 = 1.0;

/// Reference 3-stage schedule used by AC-7: 200-pair 32x32 corpus, k = 3
/// difficulty groups, 6 total epochs split proportionally, 30-step chains.
fn reference_train_config() -> TrainConfig {
    TrainConfig { epochs: 6, steps: 30, lr: 1e-3, seed: 0, ..Default::default() }
}

fn gate<F: FnOnce() + std::panic::UnwindSafe>(name: &str, f: F) {
    let result = std::panic::catch_unwind(f);
    println!("{name} {}", if result.is_ok() { "PASS" } else { "FAIL" });
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn ac1_gradient_correctness() {
    gate("AC-1", || {
        let start = Instant::now();
        let tol = 1e-3;
        let step = 1e-4;
        for seed in 0..10u64 {
            // strictly positive inputs so sqrt/log10/div stay smooth
            let x = Tensor::randn(&[2, 3, 4], 0.5, seed);
            let pos = Tensor::new(
                vec![2, 3, 4],
                x.data.iter().map(|v| v.abs() + 1.0).collect(),
            )
            .unwrap();
            let y = Tensor::randn(&[2, 3, 4], 0.5, seed + 100);

            let unary: Vec<(&str, Box<dyn Fn(&mut Tape, decloud::tensor::Var) -> decloud::Result<decloud::tensor::Var>>)> = vec![
                ("scale", Box::new(|t, v| t.scale(v, 1.7))),
                ("add_scalar", Box::new(|t, v| t.add_scalar(v, 0.3))),
                ("silu", Box::new(|t, v| t.silu(v))),
                ("sum", Box::new(|t, v| t.sum(v))),
                ("reshape", Box::new(|t, v| t.reshape(v, &[4, 6]))),
            ];
            for (name, op) in unary {
                let rel = grad_check(|t, v| { let o = op(t, v)?; t.mean(o) }, &x, step).unwrap();
                assert!(rel < tol, "{name}: {rel}");
            }
            for (name, f) in [
                ("sqrt", 0usize),
                ("log10", 1),
                ("relu_shifted", 2),
            ] {
                let rel = grad_check(
                    move |t: &mut Tape, v| {
                        let o = match f {
                            0 => t.sqrt(v)?,
                            1 => t.log10(v)?,
                            _ => t.relu(v)?, // positive input: away from the kink
                        };
                        t.mean(o)
                    },
                    &pos,
                    step,
                )
                .unwrap();
                assert!(rel < tol, "{name}: {rel}");
            }
            for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3)] {
                let yy = if which == 3 { pos.clone() } else { y.clone() };
                let rel = grad_check(
                    |t, v| {
                        let o = t.constant(&yy)?;
                        let r = match which {
                            0 => t.add(v, o)?,
                            1 => t.sub(v, o)?,
                            2 => t.mul(v, o)?,
                            _ => t.div(v, o)?,
                        };
                        t.mean(r)
                    },
                    &x,
                    step,
                )
                .unwrap();
                assert!(rel < tol, "{name}: {rel}");
            }

            let a = Tensor::randn(&[3, 4], 0.5, seed + 1);
            let b = Tensor::randn(&[4, 2], 0.5, seed + 2);
            let rel = grad_check(
                |t, v| {
                    let bb = t.constant(&b)?;
                    let m = t.matmul(v, bb)?;
                    t.mean(m)
                },
                &a,
                step,
            )
            .unwrap();
            assert!(rel < tol, "matmul: {rel}");
            let rel = grad_check(|t, v| { let o = t.transpose2d(v)?; t.mean(o) }, &a, step).unwrap();
            assert!(rel < tol, "transpose2d: {rel}");

            let img = Tensor::randn(&[1, 3, 6, 6], 0.5, seed + 3);
            let ker = Tensor::randn(&[4, 3, 3, 3], 0.5, seed + 4);
            for stride in [1usize, 2] {
                // input gradient
                let rel = grad_check(
                    |t, v| {
                        let k = t.constant(&ker)?;
                        let c = t.conv2d(v, k, stride, 1)?;
                        t.mean(c)
                    },
                    &img,
                    step,
                )
                .unwrap();
                assert!(rel < tol, "conv2d input s{stride}: {rel}");
                // kernel gradient
                let rel = grad_check(
                    |t, v| {
                        let i = t.constant(&img)?;
                        let c = t.conv2d(i, v, stride, 1)?;
                        t.mean(c)
                    },
                    &ker,
                    step,
                )
                .unwrap();
                assert!(rel < tol, "conv2d kernel s{stride}: {rel}");
            }
            let rel = grad_check(
                |t, v| {
                    let u = t.upsample_nearest2(v)?;
                    t.mean(u)
                },
                &img,
                step,
            )
            .unwrap();
            assert!(rel < tol, "upsample: {rel}");
            let rel = grad_check(
                |t, v| {
                    let o = t.constant(&img)?;
                    let c = t.concat_channels(v, o)?;
                    let sq = t.mul(c, c)?;
                    t.mean(sq)
                },
                &img,
                step,
            )
            .unwrap();
            assert!(rel < tol, "concat_channels: {rel}");
            let rel = grad_check(
                |t, v| {
                    let s = t.channel_slice(v, 1)?;
                    let sq = t.mul(s, s)?;
                    t.mean(sq)
                },
                &img,
                step,
            )
            .unwrap();
            assert!(rel < tol, "channel_slice: {rel}");
        }

        // the full net on an 8x8 input, 10 seeds
        for seed in 0..10u64 {
            let mut net = UNet::new(UNetConfig { seed, ..Default::default() }).unwrap();
            net.set_trainable(true, true, true);
            let x = Tensor::randn(&[1, 3, 8, 8], 0.6, seed + 50);
            let c = Tensor::randn(&[1, 3, 8, 8], 0.6, seed + 60);
            let mut store = std::mem::take(&mut net.store);
            let rel = grad_check_store(
                &mut store,
                |tape, store| {
                    let mut probe = net.clone();
                    probe.store = store.clone();
                    let xv = tape.constant(&x)?;
                    let cv = tape.constant(&c)?;
                    let out = probe.forward(
                        tape,
                        xv,
                        3,
                        20,
                        PromptCondition::Thin,
                        Some(cv),
                        &FreeUParams::identity(),
                        1.0,
                    )?;
                    let sq = tape.mul(out, out)?;
                    tape.mean(sq)
                },
                step,
                2,
                seed,
            )
            .unwrap();
            assert!(rel < tol, "full net seed {seed}: {rel}");
        }
        assert!(start.elapsed().as_secs() < 120, "AC-1 exceeded 2 minutes");
    });
}

#[test]
fn ac2_metric_oracles() {
    gate("AC-2", || {
        let zero = Image::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
        let half = Image::new(16, 16, vec![0.5; 16 * 16 * 3]).unwrap();
        assert!((psnr(&zero, &half).unwrap() - 6.0206).abs() < 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 32);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        // 2 channels over 2x2: ch1 all 1, ch2 all 2 -> [[1,2],[2,4]]
        let f = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let g = gram_matrix(&f).unwrap();
        assert_eq!(g.data, vec![1.0, 2.0, 2.0, 4.0]);

        // score formula: l1*MSE + l2*(1-SSIM); at (0.04, 0.9) that is 0.14
        let combine = |l1: f64, m: f64, l2: f64, s: f64| l1 * m + l2 * (1.0 - s);
        assert!((combine(1.0, 0.04, 1.0, 0.9) - 0.14).abs() < 1e-12);
        let b = random_image(&mut rng, 32);
        let direct = complexity_score(&a, &b, 2.0, 3.0).unwrap();
        let parts = combine(2.0, mse(&a, &b).unwrap(), 3.0, ssim(&a, &b).unwrap());
        assert!((direct - parts).abs() < 1e-12);

        // independent brute-force sliding-window SSIM oracle
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 32);
            let b = random_image(&mut rng, 32);
            let lib = ssim(&a, &b).unwrap();
            let oracle = brute_force_ssim(&a, &b);
            assert!((lib - oracle).abs() < 1e-6, "seed {seed}: {lib} vs {oracle}");
        }
    });
}

#[test]
fn ac3_lora_algebra() {
    gate("AC-3", || {
        // B = 0 at init: adapted weight equals the base exactly
        let base = Tensor::randn(&[3, 5], 1.0, 0);
        let fresh = LoraAdapter::new((3, 5), 2, 1.0, 1).unwrap();
        assert_eq!(fresh.effective_weight(&base).unwrap().data, base.data);

        // worked example: base I2, A [[1],[0]], B [[0,1]], alpha 2, r 1
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut ad = LoraAdapter::new((2, 2), 1, 2.0, 2).unwrap();
        ad.a.data = vec![1.0, 0.0];
        ad.b.data = vec![0.0, 1.0];
        assert_eq!(ad.effective_weight(&eye).unwrap().data, vec![1.0, 2.0, 0.0, 1.0]);

        // merged weight forward vs adapter-attached forward
        let x = Tensor::randn(&[2, 4], 0.7, 3);
        let merged = ad.merge(&eye).unwrap();
        let (ya, yb) = {
            let mut tape = Tape::new();
            let wv = tape.constant(&ad.effective_weight(&eye).unwrap()).unwrap();
            let mv = tape.constant(&merged).unwrap();
            let xv = tape.constant(&x).unwrap();
            let a = tape.matmul(wv, xv).unwrap();
            let b = tape.matmul(mv, xv).unwrap();
            (tape.tensor(a), tape.tensor(b))
        };
        let max = ya.data.iter().zip(&yb.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(max < 1e-10);

        // full-rank adapters represent arbitrary 4x4 deltas
        for seed in 0..5u64 {
            let d = Tensor::randn(&[4, 4], 1.0, seed + 10);
            let mut full = LoraAdapter::new((4, 4), 4, 4.0, seed + 20).unwrap();
            // α/r = 1, A is invertible w.p. 1: solve A·B = D directly
            let b = solve4(&full.a.data, &d.data);
            full.b.data = b;
            let zero = Tensor::new(vec![4, 4], vec![0.0; 16]).unwrap();
            let got = full.effective_weight(&zero).unwrap();
            let err = got.data.iter().zip(&d.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(err < 1e-8, "seed {seed}: {err}");
        }

        // base weights bitwise frozen through a real training run
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_corpus(9, 10, 16, 0.5, dir.path(), true).unwrap();
        let mut net = UNet::new(UNetConfig::default()).unwrap();
        let before: Vec<Vec<f64>> = ["enc0a.w", "mid.w", "dec0b.w", "out.w", "ctrl1a.w"]
            .iter()
            .map(|n| net.store.get(net.store.id(n).unwrap()).data.clone())
            .collect();
        let cfg = TrainConfig { epochs: 1, steps: 20, ..Default::default() };
        let plan = StagePlan { stages: vec![(vec![1], 1)] };
        let enable = TrainEnable { control: false, ..Default::default() }; // LoRA-only mode
        train(&mut net, &manifest, &cfg, &plan, &enable, None).unwrap();
        for (i, n) in ["enc0a.w", "mid.w", "dec0b.w", "out.w", "ctrl1a.w"].iter().enumerate() {
            let after = &net.store.get(net.store.id(n).unwrap()).data;
            assert_eq!(&before[i], after, "{n} moved");
        }
    });
}

#[test]
fn ac4_freeu() {
    gate("AC-4", || {
        // worked scalar case: h=1, (s1,s2,b1,b2) = (2,1,3,0.5) -> 9.5
        let h = Tensor::new(vec![1], vec![1.0]).unwrap();
        let p = FreeUParams { s1: 2.0, s2: 1.0, b1: 3.0, b2: 0.5 };
        assert_eq!(decloud::net::freeu_transform(&h, &p).data, vec![9.5]);

        let net = UNet::new(UNetConfig::default()).unwrap();
        let x = Tensor::randn(&[1, 3, 16, 16], 0.5, 1);
        let c = Tensor::randn(&[1, 3, 16, 16], 0.5, 2);
        let out = |freeu: &FreeUParams| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x).unwrap();
            let cv = tape.constant(&c).unwrap();
            let o = net
                .forward(&mut tape, xv, 5, 20, PromptCondition::Thin, Some(cv), freeu, 1.0)
                .unwrap();
            tape.tensor(o)
        };
        let base = out(&FreeUParams::identity());
        let identity_again = out(&FreeUParams { s1: 1.0, s2: 0.0, b1: 1.0, b2: 0.0 });
        assert_eq!(base.data, identity_again.data); // bitwise
        let tuned = out(&FreeUParams::tuned());
        let diff = base.data.iter().zip(&tuned.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff > 1e-9, "tuned parameters had no effect");
    });
}

#[test]
fn ac5_schedule_and_sampling() {
    gate("AC-5", || {
        for t_max in [20usize, 50, 200, 1000] {
            let s = DiffusionSchedule::new(t_max).unwrap();
            for w in s.alpha_bars.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert!(s.alpha_bars[t_max - 1] < 0.01, "abar_T at T={t_max}");
        }

        let sched = DiffusionSchedule::new(50).unwrap();
        let x0 = Tensor::randn(&[1, 3, 8, 8], 0.5, 3);
        let eps = Tensor::randn(&[1, 3, 8, 8], 1.0, 4);
        for t in [0usize, 17, 49] {
            let xt = sched.q_sample(&x0, t, &eps).unwrap();
            let back = sched.predict_x0(&xt, t, &eps).unwrap();
            let err = back.data.iter().zip(&x0.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "t={t}: {err}");
        }

        // scale == 1 equals the unguided conditional step exactly
        let net = UNet::new(UNetConfig::default()).unwrap();
        let xt = Tensor::randn(&[1, 3, 8, 8], 1.0, 5);
        let control = Tensor::randn(&[1, 3, 8, 8], 0.5, 6);
        let sched20 = DiffusionSchedule::new(20).unwrap();
        let cfg = SampleConfig { scale: 1.0, steps: 20, ..Default::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let guided = guided_step(&net, &sched20, &xt, 7, &control, &cfg, &mut r1).unwrap();
        // conditional-only reference, mirroring the update arithmetic
        let eps_cond = {
            let mut tape = Tape::new();
            let xv = tape.constant(&xt).unwrap();
            let cv = tape.constant(&control).unwrap();
            let o = net
                .forward(&mut tape, xv, 7, 20, cfg.prompt, Some(cv), &cfg.freeu, cfg.strength)
                .unwrap();
            tape.tensor(o)
        };
        let (beta, alpha, ab) = (sched20.betas[7], sched20.alphas[7], sched20.alpha_bars[7]);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mut reference: Vec<f64> = xt
            .data
            .iter()
            .zip(&eps_cond.data)
            .map(|(x, e)| inv * (x - coef * e))
            .collect();
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let sigma = (beta * (1.0 - sched20.alpha_bars[6]) / (1.0 - ab)).sqrt();
        let z = noise_like(&mut r2, reference.len());
        for (o, n) in reference.iter_mut().zip(&z) {
            *o += sigma * n;
        }
        assert_eq!(guided.data, reference); // exact, including the noise draw

        // fixed-seed sampling is bit-reproducible
        let img = Image::new(16, 16, vec![0.25; 16 * 16 * 3]).unwrap();
        let sc = SampleConfig { steps: 20, seed: 11, ..Default::default() };
        let a = remove_clouds(&net, &img, &sc).unwrap();
        let b = remove_clouds(&net, &img, &sc).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    });
}

#[test]
fn ac6_clustering() {
    gate("AC-6", || {
        // 3 separable blobs recovered on 10/10 seeds
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut points = Vec::new();
            let centers = [[0.0, 0.0], [10.0, 0.0], [5.0, 10.0]];
            for c in &centers {
                for _ in 0..20 {
                    points.push([
                        c[0] + rng.gen_range(-0.5..0.5),
                        c[1] + rng.gen_range(-0.5..0.5),
                    ]);
                }
            }
            let r = kmeans(&points, 3, seed, 100).unwrap();
            // every blob maps to exactly one cluster
            for blob in 0..3 {
                let first = r.assignment[blob * 20];
                assert!(
                    r.assignment[blob * 20..(blob + 1) * 20].iter().all(|&a| a == first),
                    "seed {seed}: blob {blob} split"
                );
            }
            let mut labels: Vec<usize> = (0..3).map(|b| r.assignment[b * 20]).collect();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), 3, "seed {seed}: blobs merged");
            // objective non-increasing per iteration
            for w in r.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
            // assignments partition the input
            assert_eq!(r.assignment.len(), points.len());
            assert!(r.assignment.iter().all(|&a| a < 3));
        }

        // stage plan conserves epochs; grouping orders stages easy -> hard
        let plan = make_stage_plan(&[30, 50, 20], 10).unwrap();
        assert_eq!(plan.total_epochs(), 10);
        assert_eq!(plan.stages.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = gen_corpus(4, 30, 16, 0.5, dir.path(), true).unwrap();
        group_corpus(&mut manifest, 3, 0, 1.0, 1.0).unwrap();
        let mean_score = |g: usize| {
            let v: Vec<f64> = manifest
                .train()
                .filter(|e| e.group == Some(g))
                .map(|e| e.score.unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_score(1) <= mean_score(2));
        assert!(mean_score(2) <= mean_score(3));
    });
}

#[test]
fn ac7_end_to_end_trend() {
    gate("AC-7", || {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = gen_corpus(0, 200, 32, 0.5, dir.path(), true).unwrap();
        group_corpus(&mut manifest, 3, 0, 1.0, 1.0).unwrap();
        let mut sizes = vec![0usize; 3];
        for e in manifest.train() {
            sizes[e.group.unwrap() - 1] += 1;
        }

        let cfg = reference_train_config();
        let plan = make_stage_plan(&sizes, cfg.epochs).unwrap();
        let mut net = UNet::new(UNetConfig { seed: cfg.seed, ..Default::default() }).unwrap();
        train(&mut net, &manifest, &cfg, &plan, &TrainEnable::default(), None).unwrap();

        let sample = SampleConfig { steps: 30, ..Default::default() };
        let baseline =
            decloud::diffusion::cloudy_baseline_psnr(&manifest, Split::Test, Some(CloudType::Thin))
                .unwrap();
        let mut thin_sum = 0.0;
        let mut thin_n = 0usize;
        let entries: Vec<_> = manifest.entries.iter().filter(|e| e.split == Split::Test).collect();
        for (i, e) in entries.iter().enumerate() {
            let clean = load_image(manifest.clean_path(e)).unwrap();
            let cloudy = load_image(manifest.cloudy_path(e)).unwrap();
            let seed = sample.seed + (i as u64).wrapping_mul(0x9e37_79b9);
            let thin_out = remove_clouds(
                &net,
                &cloudy,
                &SampleConfig { prompt: PromptCondition::Thin, seed, ..sample.clone() },
            )
            .unwrap();
            let thick_out = remove_clouds(
                &net,
                &cloudy,
                &SampleConfig { prompt: PromptCondition::Thick, seed, ..sample.clone() },
            )
            .unwrap();
            // same seed, same chain noise: only the prompt differs
            assert_ne!(thin_out.pixels(), thick_out.pixels(), "{}: prompts indistinct", e.id);
            if e.cloud_type == CloudType::Thin {
                thin_sum += psnr(&thin_out, &clean).unwrap();
                thin_n += 1;
            }
        }
        let restored = thin_sum / thin_n as f64;
        println!(
            "AC-7 detail: thin test split over {thin_n} pairs: restored {restored:.2} dB vs \
             cloudy {baseline:.2} dB (pinned margin {PINNED_MARGIN_DB} dB)"
        );
        assert!(restored >= baseline + PINNED_MARGIN_DB);
        assert!(start.elapsed().as_secs() < 30 * 60, "AC-7 exceeded 30 minutes");
    });
}

#[test]
fn ac8_grouped_training_trend() {
    gate("AC-8", || {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = gen_corpus(1, 60, 16, 0.5, dir.path(), true).unwrap();
        group_corpus(&mut manifest, 3, 0, 1.0, 1.0).unwrap();
        let cfg = TrainConfig { epochs: 6, steps: 30, lr: 1e-3, seed: 0, ..Default::default() };

        // equal total optimizer steps: 2 passes over every sample each way
        let grouped_plan = StagePlan {
            stages: vec![(vec![1], 2), (vec![2], 2), (vec![3], 2)],
        };
        let ungrouped_plan = StagePlan { stages: vec![(vec![1, 2, 3], 2)] };

        let final_epoch_loss = |plan: &StagePlan| {
            let mut net = UNet::new(UNetConfig { seed: cfg.seed, ..Default::default() }).unwrap();
            let rows = train(&mut net, &manifest, &cfg, plan, &TrainEnable::default(), None).unwrap();
            // rows of the schedule's final epoch
            let (groups, epochs) = plan.stages.last().unwrap();
            let pool: usize = manifest
                .train()
                .filter(|e| groups.contains(&e.group.unwrap()))
                .count();
            let per_epoch = pool.div_ceil(cfg.batch);
            assert!(rows.len() >= per_epoch * epochs);
            let last: &[decloud::diffusion::LossRow] = &rows[rows.len() - per_epoch..];
            last.iter().map(|r| r.loss).sum::<f64>() / last.len() as f64
        };

        let grouped = final_epoch_loss(&grouped_plan);
        let ungrouped = final_epoch_loss(&ungrouped_plan);
        println!("AC-8 detail: grouped final-epoch loss {grouped:.4} vs ungrouped {ungrouped:.4}");
        assert!(grouped <= ungrouped, "grouped {grouped} > ungrouped {ungrouped}");
    });
}

#[test]
fn ac9_reproducibility_and_formats() {
    gate("AC-9", || {
        // checkpoint round-trip: forward agrees to 1e-12
        let dir = tempfile::tempdir().unwrap();
        let net = UNet::new(UNetConfig { seed: 3, ..Default::default() }).unwrap();
        let path = dir.path().join("rt.dc4c");
        net.save(&path).unwrap();
        let loaded = UNet::load(&path).unwrap();
        let x = Tensor::randn(&[1, 3, 8, 8], 0.5, 1);
        let c = Tensor::randn(&[1, 3, 8, 8], 0.5, 2);
        let fwd = |n: &UNet| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x).unwrap();
            let cv = tape.constant(&c).unwrap();
            let o = n
                .forward(&mut tape, xv, 4, 20, PromptCondition::Thick, Some(cv), &FreeUParams::tuned(), 1.1)
                .unwrap();
            tape.tensor(o)
        };
        let (a, b) = (fwd(&net), fwd(&loaded));
        let err = a.data.iter().zip(&b.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-12);

        // seeded CLI invocations are hash-stable
        let bin = env!("CARGO_BIN_EXE_decloud");
        let run = |args: &[&str]| {
            let out = std::process::Command::new(bin).args(args).output().unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        };
        let (d1, d2) = (dir.path().join("c1"), dir.path().join("c2"));
        for d in [&d1, &d2] {
            run(&["dataset", "--out", d.to_str().unwrap(), "--n", "10", "--size", "16", "--seed", "5"]);
            run(&["group", "--manifest", d.join("manifest.jsonl").to_str().unwrap(), "--k", "2"]);
        }
        assert_eq!(
            std::fs::read(d1.join("manifest.jsonl")).unwrap(),
            std::fs::read(d2.join("manifest.jsonl")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.join("pair0002_cloudy.png")).unwrap(),
            std::fs::read(d2.join("pair0002_cloudy.png")).unwrap()
        );

        // documented schemas: manifest fields, run record, eval artifacts
        for line in std::fs::read_to_string(d1.join("manifest.jsonl")).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["id", "clean", "cloudy", "cloud_type", "split"] {
                assert!(!v[key].is_null(), "manifest missing {key}");
            }
            assert!(matches!(v["cloud_type"].as_str(), Some("thin" | "thick")));
            assert!(matches!(v["split"].as_str(), Some("train" | "test")));
        }
        let rec: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d1.join("run.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(rec["command"], "group"); // last command to touch the dir wins
        assert!(rec["config"]["train"].is_object());
        assert!(rec["args"].is_object());

        // evaluate report schema on a real (briefly trained) model
        let manifest = decloud::synthcloud::CorpusManifest::load(d1.join("manifest.jsonl")).unwrap();
        let mut m2 = manifest.clone();
        let mut net = UNet::new(UNetConfig::default()).unwrap();
        let cfg = TrainConfig { epochs: 1, steps: 20, ..Default::default() };
        let plan = StagePlan { stages: vec![(vec![1, 2], 1)] };
        train(&mut net, &m2, &cfg, &plan, &TrainEnable::default(), None).unwrap();
        let sample = SampleConfig { steps: 20, ..Default::default() };
        let (rows, summary) = evaluate(&net, &mut m2, Split::Test, &sample).unwrap();
        assert_eq!(rows.len(), summary.n);
        let ids: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    });
}

// ---- helpers ------------------------------------------------------------

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let pixels = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    Image::new(size, size, pixels).unwrap()
}

/// Standard normal draws matching the library's Box-Muller stream.
fn noise_like(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(r * th.cos());
        if data.len() < n {
            data.push(r * th.sin());
        }
    }
    data
}

/// Windowed SSIM computed the slow way: an explicit 2-d Gaussian-weighted
/// window at every valid position, no separable filtering.
fn brute_force_ssim(a: &Image, b: &Image) -> f64 {
    let k = SSIM_WINDOW;
    let half = k / 2;
    let mut taps = vec![0.0; k];
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - k) {
            for x0 in 0..=(w - k) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wgt = taps[dy] * taps[dx];
                        let pa = a.get(x0 + dx, y0 + dy, c);
                        let pb = b.get(x0 + dx, y0 + dy, c);
                        ma += wgt * pa;
                        mb += wgt * pb;
                        maa += wgt * pa * pa;
                        mbb += wgt * pb * pb;
                        mab += wgt * pa * pb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

/// Solves A·X = D for 4x4 row-major matrices by Gaussian elimination.
fn solve4(a: &[f64], d: &[f64]) -> Vec<f64> {
    let n = 4;
    let mut m = vec![0.0; n * 2 * n];
    for r in 0..n {
        for c in 0..n {
            m[r * 2 * n + c] = a[r * n + c];
            m[r * 2 * n + n + c] = d[r * n + c];
        }
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&p, &q| {
                m[p * 2 * n + col].abs().partial_cmp(&m[q * 2 * n + col].abs()).unwrap()
            })
            .unwrap();
        for c in 0..2 * n {
            m.swap(col * 2 * n + c, piv * 2 * n + c);
        }
        let lead = m[col * 2 * n + col];
        for c in 0..2 * n {
            m[col * 2 * n + c] /= lead;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * 2 * n + col];
                for c in 0..2 * n {
                    m[r * 2 * n + c] -= f * m[col * 2 * n + c];
                }
            }
        }
    }
    let mut x = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            x[r * n + c] = m[r * 2 * n + n + c];
        }
    }
    x
}
