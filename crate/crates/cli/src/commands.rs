use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bvos_core::attention::{build_bilateral_mask, AttentionConfig, BilateralEncoding};
use bvos_core::flow::{read_flo, write_flo, write_flow_ppm};
use bvos_core::harness::{bench_attention, gradient_suite, run_ablation, Arm, GRAD_TOLERANCE};
use bvos_core::image_io::{write_pgm, write_ppm};
use bvos_core::metrics::{default_tolerance, jf_report, score_sequence, summary_line, write_csv};
use bvos_core::model::{segment_sequence, FrameMemory, Model};
use bvos_core::synthetic::{generate_sequence, make_ablation_suite, random_scene};
use bvos_core::train::train_with;
use bvos_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{preset, write_json, DataConfig, RunConfig};
use crate::{Command, DataArgs};

fn apply(data: &mut DataConfig, args: DataArgs) {
    if let Some(c) = args.categories {
        data.categories = c;
    }
    if let Some(s) = args.data_seed {
        data.seed = s;
    }
    if let Some(n) = args.count {
        data.count = n;
    }
    if let Some(w) = args.width {
        data.width = w;
    }
    if let Some(h) = args.height {
        data.height = h;
    }
    if let Some(f) = args.frames {
        data.frames = f;
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn run(command: Command, mut cfg: RunConfig) -> Result<ExitCode> {
    match command {
        Command::GenData { out, data } => {
            apply(&mut cfg.data, data);
            gen_data(&cfg.data, &out)?;
        }
        Command::Train {
            out,
            preset: p,
            arm,
            iterations,
            lr,
            batch,
            seed,
            data,
        } => {
            if let Some(p) = p {
                cfg.model = preset(&p)?;
            }
            if let Some(a) = arm {
                let Some(arm) = Arm::parse(&a) else {
                    bail!("unknown arm {a:?}");
                };
                cfg.model = arm.configure(&cfg.model);
            }
            let t = &mut cfg.train;
            t.iterations = iterations.unwrap_or(t.iterations);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.batch_size = batch.unwrap_or(t.batch_size);
            t.seed = seed.unwrap_or(t.seed);
            apply(&mut cfg.data, data);
            train(&cfg, &out)?;
        }
        Command::Eval {
            model,
            out,
            save_masks,
            data,
        } => {
            apply(&mut cfg.eval, data);
            eval(&model, &cfg.eval, &out, save_masks)?;
        }
        Command::Ablate { arms, out, suite_seed } => ablate(&arms, &out, suite_seed)?,
        Command::Bench {
            out,
            sizes,
            reps,
            channels,
            seed,
        } => {
            let report = bench_attention(&sizes, &AttentionConfig::toy(channels, 1), reps, seed)?;
            fs::create_dir_all(&out)?;
            report.write_csv(&mut create(&out.join("bench.csv"))?)?;
            write_json(&out.join("bench.json"), &report)?;
            println!(
                "dense slope {:.3}, windowed slope {:.3}, gap {:.3}",
                report.dense_slope,
                report.windowed_slope,
                report.slope_gap()
            );
        }
        Command::VizMask {
            out,
            model,
            category,
            frame,
            side,
            spatial_window,
            bilateral_window,
            seed,
            query,
            scale,
            dump,
        } => {
            let (encoding, attention) = match model {
                Some(dir) => model_encoding(&dir, category, seed, frame)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let values = Tensor::randn(&[side * side, 1], 1.0, &mut rng);
                    let base = AttentionConfig::toy(4, 1);
                    let attention = AttentionConfig {
                        spatial_window,
                        bilateral_window: bilateral_window
                            .unwrap_or(bvos_core::attention::scaled_bilateral_window(spatial_window)),
                        ..base
                    };
                    (BilateralEncoding::new(side, side, values)?, attention)
                }
            };
            let mask = build_bilateral_mask(&encoding, &attention)?;
            let q = query.unwrap_or(mask.height() / 2 * mask.width() + mask.width() / 2);
            mask.write_query_pgm(&mut create(&out)?, q, scale)?;
            if let Some(d) = dump {
                fs::write(&d, mask.dump_text())?;
            }
            println!(
                "query {q} admits {} keys; mean {:.2}, max {} per query",
                mask.admitted(q).len(),
                mask.mean_candidates(),
                mask.max_candidates()
            );
        }
        Command::VizFlow { input, out, max_radius } => {
            let flow = read_flo(&mut BufReader::new(File::open(&input).with_context(|| input.display().to_string())?))?;
            write_flow_ppm(&mut create(&out)?, &flow, max_radius)?;
        }
        Command::Gradcheck { out, seeds, coords } => {
            let rows = gradient_suite(seeds, coords)?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                writeln!(w, "check,seed,max_rel_error,coordinates")?;
                for r in &rows {
                    writeln!(w, "{},{},{:.3e},{}", r.name, r.seed, r.max_rel_error, r.coordinates)?;
                }
            }
            let failed: Vec<_> = rows.iter().filter(|r| !r.passes()).collect();
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("{} checks, worst relative error {worst:.2e}, tolerance {GRAD_TOLERANCE:e}", rows.len());
            for r in &failed {
                println!("FAILED {} seed {}: {:.2e}", r.name, r.seed, r.max_rel_error);
            }
            if !failed.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct IndexEntry {
    name: String,
    category: String,
    frames: usize,
}

fn gen_data(data: &DataConfig, out: &Path) -> Result<()> {
    let mut index = Vec::new();
    for s in data.scenes()? {
        let seq = generate_sequence(&s.scene, &s.name)?;
        let dir = out.join(&s.name);
        fs::create_dir_all(&dir)?;
        let (w, h) = (s.scene.width, s.scene.height);
        for (t, frame) in seq.frames.iter().enumerate() {
            write_ppm(&mut create(&dir.join(format!("frame_{t:02}.ppm")))?, w, h, &frame.rgb)?;
            write_pgm(&mut create(&dir.join(format!("mask_{t:02}.pgm")))?, w, h, &seq.masks[t])?;
        }
        for (t, (gt, noisy)) in seq.flows.iter().zip(&seq.noisy_flows).enumerate() {
            write_flo(&mut create(&dir.join(format!("flow_{t:02}.flo")))?, gt)?;
            write_flo(&mut create(&dir.join(format!("noisy_flow_{t:02}.flo")))?, noisy)?;
        }
        write_json(&dir.join("scene.json"), &s.scene)?;
        index.push(IndexEntry {
            name: s.name.clone(),
            category: s.category.name().to_string(),
            frames: seq.len(),
        });
    }
    write_json(&out.join("index.json"), &index)?;
    println!("wrote {} sequences to {}", index.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    steps: usize,
    diverged: Option<usize>,
    final_loss: Option<f64>,
    seconds: f64,
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = cfg.data.sequences()?;
    let t0 = Instant::now();
    let every = (cfg.train.iterations / 20).max(1);
    let outcome = train_with(&cfg.model, &cfg.train, &data, |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>5}  loss {:.4}  ce {:.4}  jaccard {:.4}  flow {:.4}  {:.0?}",
                r.step,
                r.total,
                r.ce,
                r.jaccard,
                r.mse,
                t0.elapsed()
            );
        }
    })?;
    let model_dir = out.join("model");
    fs::create_dir_all(&model_dir)?;
    outcome.model.save(&model_dir)?;
    let mut w = create(&out.join("losses.csv"))?;
    writeln!(w, "step,total,ce,jaccard,mse")?;
    for r in &outcome.losses {
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6}", r.step, r.total, r.ce, r.jaccard, r.mse)?;
    }
    write_json(
        &out.join("train.json"),
        &TrainSummary {
            config: cfg,
            steps: outcome.losses.len(),
            diverged: outcome.diverged,
            final_loss: outcome.losses.last().map(|r| r.total),
            seconds: t0.elapsed().as_secs_f64(),
        },
    )?;
    if let Some(step) = outcome.diverged {
        eprintln!("training diverged at step {step}; saved the last finite weights");
    }
    println!("checkpoint written to {}", model_dir.display());
    Ok(())
}

fn eval(model_dir: &Path, data: &DataConfig, out: &Path, save_masks: bool) -> Result<()> {
    let model = Model::load(model_dir).with_context(|| format!("loading checkpoint {}", model_dir.display()))?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for seq in data.sequences()? {
        let images: Vec<Tensor> = seq.frames.iter().map(|f| f.to_tensor()).collect();
        let seg = segment_sequence(&model, &images, &seq.masks[0], &seq.noisy_flows)?;
        let (w, h) = (seq.scene.width, seq.scene.height);
        rows.extend(score_sequence(&seq.name, &seg.masks, &seq.masks, w, h, default_tolerance(w, h))?);
        if save_masks {
            let dir = out.join("masks").join(&seq.name);
            fs::create_dir_all(&dir)?;
            for (t, m) in seg.masks.iter().enumerate() {
                write_pgm(&mut create(&dir.join(format!("pred_{t:02}.pgm")))?, w, h, m)?;
            }
        }
        diagnostics.push((seq.name.clone(), seg.diagnostics));
    }
    let summary = jf_report(&rows)?;
    write_csv(&mut create(&out.join("scores.csv"))?, &rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("diagnostics.json"), &diagnostics)?;
    println!("{}", summary_line(&summary));
    Ok(())
}

fn ablate(arms: &[String], out: &Path, suite_seed: u64) -> Result<()> {
    let mut models = Vec::new();
    for arm in arms {
        let Some((name, dir)) = arm.split_once('=') else {
            bail!("arm {arm:?} is not NAME=DIR");
        };
        let model = Model::load(Path::new(dir)).with_context(|| format!("loading checkpoint for arm {name}"))?;
        models.push((name.to_string(), model));
    }
    let arms: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let report = run_ablation(&arms, &make_ablation_suite(suite_seed))?;
    fs::create_dir_all(out)?;
    report.write_csv(&mut create(&out.join("ablation.csv"))?)?;
    write_json(&out.join("ablation.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}

/// The encoding a checkpoint computes for `frame` of a synthetic scene,
/// with frame 0 and its ground truth as memory.
fn model_encoding(
    dir: &Path,
    category: bvos_core::synthetic::Category,
    seed: u64,
    frame: usize,
) -> Result<(BilateralEncoding, AttentionConfig)> {
    let model = Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let seq = generate_sequence(&random_scene(category, seed, 64, 64, frame + 1), "viz")?;
    if frame == 0 {
        bail!("frame must be at least 1");
    }
    let mut memory = FrameMemory::new(model.config().memory_capacity);
    memory.push(model.memory_entry(0, &seq.frames[0].to_tensor(), &seq.masks[0])?);
    let prev: Vec<f64> = seq.masks[frame - 1].iter().map(|&l| f64::from(l > 0)).collect();
    let inf = model.infer_frame(&seq.frames[frame].to_tensor(), &memory, &seq.noisy_flows[frame - 1], &prev)?;
    Ok((inf.encoding, model.config().attention.clone()))
}
