use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use cbamnet::data::{augment, load_directory, split, synth_generate, write_dataset_ppm, Dataset};
use cbamnet::evaluation::{cross_validate, render_report, render_test_report, CvOptions, MetricReport, RenderedReport};
use cbamnet::model::ModelVars;
use cbamnet::tensor::{gradient_check_with, GradCheckReport};
use cbamnet::training::{evaluate, fit, load_checkpoint, save_checkpoint};
use cbamnet::{Graph, Tensor};

use crate::config::{ModelSpec, RunConfig};
use crate::failure::{exit, Failure};

pub const GRADCHECK_SIZE: usize = 16;
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_BOUND: f64 = 1e-4;

/// Where data comes from and where results go, after command-line overrides.
pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl RunContext {
    pub fn new(
        config_path: &Path,
        data: Option<PathBuf>,
        out: Option<PathBuf>,
        seed: Option<u64>,
        threads: usize,
    ) -> Result<Self, Failure> {
        let mut config = RunConfig::load(config_path)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        if data.is_some() {
            config.data = data;
        }
        if out.is_some() {
            config.out = out;
        }
        let out = config
            .out
            .clone()
            .ok_or_else(|| Failure::config("no output directory: pass --out or set out in the config"))?;
        if threads == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        Ok(RunContext { config, out, threads })
    }

    fn dataset(&self) -> Result<Dataset, Failure> {
        acquire(&self.config)
    }

    /// Per-model output directory; a subdirectory only when several models run.
    fn model_dir(&self, spec: &ModelSpec) -> Result<PathBuf, Failure> {
        let dir = if self.config.models.len() > 1 {
            self.out.join(slug(&spec.label))
        } else {
            self.out.clone()
        };
        create_dir(&dir)?;
        Ok(dir)
    }

    /// Writes the effective configuration, minus the output location, so a
    /// rerun elsewhere produces identical files.
    fn write_run_record(&self) -> Result<(), Failure> {
        create_dir(&self.out)?;
        let record = RunConfig {
            out: None,
            ..self.config.clone()
        };
        let json = serde_json::to_string_pretty(&record).expect("config serializes");
        write_file(&self.out.join("config.json"), json + "\n")
    }
}

fn acquire(cfg: &RunConfig) -> Result<Dataset, Failure> {
    if let Some(root) = &cfg.data {
        let loaded = load_directory(root).map_err(Failure::at("data"))?;
        for skipped in &loaded.skipped {
            eprintln!("warning [data]: skipped {skipped}");
        }
        Ok(loaded.dataset)
    } else if let Some(s) = &cfg.synth {
        synth_generate(s.n, s.height, s.width, cfg.seed).map_err(Failure::at("data"))
    } else {
        Err(Failure::config("no data: pass --data or set data or synth in the config"))
    }
}

fn resized_for(ds: &Dataset, spec: &ModelSpec) -> Result<Dataset, Failure> {
    let (h, w) = spec.input_size();
    ds.resized(h, w).map_err(Failure::at("data"))
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        stage: "write",
        code: exit::DATA,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        stage: "write",
        code: exit::DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn write_report(out: &Path, report: &RenderedReport) -> Result<(), Failure> {
    write_file(&out.join("report.csv"), &report.csv)?;
    write_file(&out.join("report.txt"), &report.table)
}

/// Maps `f` over `items` on up to `threads` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads.min(items.len()));
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

pub fn train(ctx: &RunContext) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let data = ctx.dataset()?;
    ctx.write_run_record()?;
    let results = parallel_map(&cfg.models, ctx.threads, |spec| train_one(ctx, &data, spec));
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = render_test_report(&rows).map_err(Failure::at("report"))?;
    write_report(&ctx.out, &report)?;
    print!("{}", report.table);
    Ok(())
}

fn train_one(ctx: &RunContext, data: &Dataset, spec: &ModelSpec) -> Result<(String, MetricReport), Failure> {
    let cfg = &ctx.config;
    let ds = resized_for(data, spec)?;
    let parts = split(&ds, &cfg.split_spec(cfg.seed)).map_err(Failure::at("split"))?;
    let train = augment(&parts.train, &cfg.augmentation).map_err(Failure::at("augment"))?;
    let val = augment(&parts.val, &cfg.augmentation).map_err(Failure::at("augment"))?;
    let mut model = spec.build(cfg.seed).map_err(Failure::at("model"))?;
    let tc = cfg.train_config(cfg.seed);
    let outcome = fit(&mut model, &train, &val, &tc).map_err(Failure::at("train"))?;
    let best = outcome.best.restore().map_err(Failure::at("train"))?;
    let test = evaluate(&best, &parts.test, tc.batch_size, cfg.threshold).map_err(Failure::at("evaluate"))?;

    let dir = ctx.model_dir(spec)?;
    save_checkpoint(&outcome.best, dir.join("checkpoint.bin")).map_err(Failure::at("write"))?;
    write_file(&dir.join("history.csv"), outcome.history.to_csv())?;
    write_file(&dir.join("confusion.txt"), test.confusion.to_string())?;
    let epoch = outcome.best.epoch.map_or("initial".to_string(), |e| format!("epoch {e}"));
    eprintln!(
        "{}: {} train / {} val / {} test samples, best {epoch} (val loss {:.6})",
        spec.label,
        train.len(),
        val.len(),
        parts.test.len(),
        outcome.best.val_loss
    );
    Ok((spec.label.clone(), test.metrics))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub label: String,
    pub threshold: Option<f64>,
}

/// Evaluates a saved checkpoint on every image of a dataset.
pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let record = load_checkpoint(&args.checkpoint).map_err(Failure::at("checkpoint"))?;
    let model = record.restore().map_err(Failure::at("checkpoint"))?;
    let config = args.config.as_deref().map(RunConfig::load).transpose()?;
    let threshold = args
        .threshold
        .or(config.as_ref().map(|c| c.threshold))
        .unwrap_or(cbamnet::evaluation::DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let data = match (&args.data, config) {
        (Some(root), _) => {
            let loaded = load_directory(root).map_err(Failure::at("data"))?;
            for skipped in &loaded.skipped {
                eprintln!("warning [data]: skipped {skipped}");
            }
            loaded.dataset
        }
        (None, Some(cfg)) => acquire(&cfg)?,
        (None, None) => return Err(Failure::config("no data: pass --data or --config")),
    };
    let [_, h, w] = record.model.backbone.input_shape;
    let ds = data.resized(h, w).map_err(Failure::at("data"))?;
    let result = evaluate(&model, &ds, 32, threshold).map_err(Failure::at("evaluate"))?;
    create_dir(&args.out)?;
    write_file(&args.out.join("confusion.txt"), result.confusion.to_string())?;
    let report = render_test_report(&[(args.label.clone(), result.metrics)]).map_err(Failure::at("report"))?;
    write_report(&args.out, &report)?;
    print!("{}", report.table);
    Ok(())
}

pub fn crossval(ctx: &RunContext, folds: usize) -> Result<(), Failure> {
    if folds < 2 {
        return Err(Failure::config(format!("--folds must be at least 2, got {folds}")));
    }
    let cfg = &ctx.config;
    let data = ctx.dataset()?;
    ctx.write_run_record()?;
    let opts = CvOptions {
        folds,
        threshold: cfg.threshold,
        threads: ctx.threads,
        augmentation: cfg.augmentation.clone(),
    };
    let tc = cfg.train_config(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.models.len());
    for spec in &cfg.models {
        let ds = resized_for(&data, spec)?;
        let report =
            cross_validate(&spec.label, |seed| spec.build(seed), &ds, &tc, &opts).map_err(Failure::at("crossval"))?;
        let dir = ctx.model_dir(spec)?;
        for f in &report.folds {
            write_file(&dir.join(format!("confusion_fold{}.txt", f.fold)), f.confusion.to_string())?;
            if let Some(h) = &f.history {
                write_file(&dir.join(format!("history_fold{}.csv", f.fold)), h.to_csv())?;
            }
        }
        reports.push(report);
    }
    let rendered = render_report(&reports).map_err(Failure::at("report"))?;
    write_report(&ctx.out, &rendered)?;
    print!("{}", rendered.table);
    Ok(())
}

/// Checks every configured model at a reduced input size. Returns whether
/// all of them met the bound.
pub fn gradcheck(cfg: &RunConfig, sigmoid_grad_fault: Option<f64>) -> Result<bool, Failure> {
    // A Monkeypox image, so the loss pulls towards label 1.
    let sample = synth_generate(2, GRADCHECK_SIZE, GRADCHECK_SIZE, cfg.seed).map_err(Failure::at("data"))?;
    let image = sample.samples()[0].pixels();
    let batch = image
        .reshape(&[1, 3, GRADCHECK_SIZE, GRADCHECK_SIZE])
        .map_err(Failure::at("data"))?;
    let labels = Tensor::vector(&[sample.samples()[0].label().value()]).map_err(Failure::at("data"))?;
    let mut all_pass = true;
    for spec in &cfg.models {
        let mut reduced = spec.clone();
        reduced.backbone = reduced.backbone.with_input_size(GRADCHECK_SIZE, GRADCHECK_SIZE);
        let model = reduced.build(cfg.seed).map_err(Failure::at("model"))?;
        let params: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
        let make_graph = || match sigmoid_grad_fault {
            Some(f) => Graph::new().with_sigmoid_grad_fault(f),
            None => Graph::new(),
        };
        let report: GradCheckReport = gradient_check_with(
            make_graph,
            |g, vars| {
                let mv = ModelVars { vars: vars.to_vec() };
                let probs = model.record_batch(g, &mv, &batch)?;
                g.bce(probs, &labels)
            },
            &params,
            GRADCHECK_STEP,
        )
        .map_err(Failure::at("gradcheck"))?;
        let pass = report.max_rel_error < GRADCHECK_BOUND;
        all_pass &= pass;
        println!(
            "{}: max relative error {:.6e} over {} coordinates ({})",
            spec.label,
            report.max_rel_error,
            report.coordinates,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(all_pass)
}

pub fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let ds = synth_generate(n, size, size, seed).map_err(Failure::at("synth"))?;
    write_dataset_ppm(&ds, out).map_err(Failure::at("write"))?;
    println!("wrote {} images ({size}x{size}) to {}", ds.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u32> = (0..23).collect();
        for threads in [1, 2, 4, 30] {
            assert_eq!(parallel_map(&xs, threads, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("Xception-CBAM-Dense"), "Xception-CBAM-Dense");
        assert_eq!(slug("a/b c"), "a_b_c");
    }
}
