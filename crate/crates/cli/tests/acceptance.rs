//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `cargo test -p eyas-cli --test acceptance -- <substring>...` runs only the
//! criteria whose name contains one of the substrings.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use eyas_core::classifier::InputFormat;
use eyas_core::config::AnalysisConfig;
use eyas_core::model::{BinaryMask, CaliberLabel, EllipseFit, Laterality};
use eyas_core::pipeline::{self, MACULA_MASK_FILE, ONH_MASK_FILE, REPORT_TXT_FILE, VESSEL_MASK_FILE};
use eyas_core::reporter::{approve, render_export, synthesize, ExportFormat, ReportTemplates, Sections};
use eyas_core::segmenter::fit_ellipse;
use eyas_core::synthgen::{gen_corpus, gen_scene, render, scene_seed, CorpusManifest, GenParams};
use eyas_core::{classifier, codec, localizer, metrics};
use eyas_services::{start, Mode, RunningServer, ServiceConfig, ServiceName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SEED: u64 = 42;
const CORPUS_SIZE: usize = 200;
const NOISE: f64 = 8.0;

type Check = Result<String, String>;

struct Fixture {
    root: tempfile::TempDir,
    corpus: PathBuf,
    pred: Option<PathBuf>,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::TempDir::new().unwrap();
        let corpus = root.path().join("corpus");
        Self { root, corpus, pred: None }
    }

    fn corpus(&self) -> &Path {
        if !self.corpus.join("manifest.json").exists() {
            gen_corpus(CORPUS_SIZE, &GenParams::standard().with_noise(NOISE), SEED, &self.corpus).unwrap();
        }
        &self.corpus
    }

    /// CLI predictions for the whole standard corpus.
    fn pred(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.pred {
            return Ok(p.clone());
        }
        let images = self.corpus().join("images");
        let out = self.root.path().join("pred");
        eyas(&["analyze", "--input", path_str(&images), "--out", path_str(&out)])?;
        self.pred = Some(out.clone());
        Ok(out)
    }

    fn manifest(&self) -> CorpusManifest {
        CorpusManifest::load(self.corpus()).unwrap()
    }
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn eyas(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eyas"))
        .args(args)
        .env_remove("EYAS_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("eyas {args:?} exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------------------

fn random_mask(rng: &mut ChaCha8Rng) -> (Vec<bool>, BinaryMask) {
    let density: f64 = [0.0, 0.05, 0.3, 0.5, 0.9, 1.0][rng.random_range(0..6)];
    let bits: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
    let m = BinaryMask::from_bools(16, 16, &bits).unwrap();
    (bits, m)
}

fn metrics_oracle() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for pair in 0..1000 {
        let (pa, a) = random_mask(&mut rng);
        let (pb, b) = random_mask(&mut rng);
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for i in 0..256 {
            match (pa[i], pb[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let ratio = |num: u32, den: u32| (den > 0).then(|| num as f64 / den as f64);
        let expect = [
            Some(ratio(tp, tp + fp + fneg).unwrap_or(1.0)),
            Some(ratio(2 * tp, 2 * tp + fp + fneg).unwrap_or(1.0)),
            ratio(tp, tp + fp),
            ratio(tp, tp + fneg),
        ];
        let got = [
            metrics::iou(&a, &b).ok(),
            metrics::dice(&a, &b).ok(),
            metrics::precision(&a, &b).ok(),
            metrics::recall(&a, &b).ok(),
        ];
        ensure(got == expect, || format!("pair {pair}: got {got:?}, oracle {expect:?}"))?;
    }
    within(t0.elapsed(), Duration::from_secs(5))?;
    Ok("1000 pairs, IoU/Dice/precision/recall exact".into())
}

fn ellipse_fit() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst_axis, mut worst_theta) = (0.0f64, 0.0f64);
    for k in 0..50 {
        let a: f64 = rng.random_range(15.0..=60.0);
        let b = a * rng.random_range(0.4..=1.0);
        let theta = rng.random_range(0.0..PI);
        let size = (2.0 * a + 12.0).ceil() as u32;
        let c = size as f64 / 2.0 + rng.random_range(-0.5..0.5);
        let truth = EllipseFit::new(c, c, a, b, theta).unwrap();
        let mask = BinaryMask::from_fn(size, size, |x, y| truth.rho(x as f64, y as f64) <= 1.0);
        let fit = fit_ellipse(&mask).map_err(|e| format!("ellipse {k}: {e}"))?;
        let axis = ((fit.a - a).abs() / a).max((fit.b - b).abs() / b);
        let d = (fit.theta - theta).rem_euclid(PI);
        let dtheta = d.min(PI - d);
        worst_axis = worst_axis.max(axis);
        worst_theta = worst_theta.max(dtheta);
        ensure(axis <= 0.02, || format!("ellipse {k} (a={a:.1} b={b:.1}): axis error {:.2}%", axis * 100.0))?;
        ensure(dtheta <= 0.05, || {
            format!("ellipse {k} (a={a:.1} b={b:.1} b/a={:.3}): theta error {dtheta:.3} rad", b / a)
        })?;
    }
    within(t0.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "50 ellipses, worst axis error {:.2}%, worst theta error {worst_theta:.3} rad",
        worst_axis * 100.0
    ))
}

fn localization(fx: &mut Fixture) -> Check {
    let corpus = fx.corpus().to_path_buf();
    let manifest = fx.manifest();
    let cfg = AnalysisConfig::default();
    let t0 = Instant::now();
    let (mut onh_hits, mut mac_hits) = (0, 0);
    for e in &manifest.entries {
        let truth = e.truth.as_ref().ok_or_else(|| format!("{} has no geometry", e.id))?;
        let img = codec::decode_image(&std::fs::read(corpus.join(&e.image)).unwrap(), Laterality::Unknown).unwrap();
        let onh = localizer::locate_onh(&img, &cfg.localizer);
        let (ox, oy) = onh.center();
        let disc = &truth.disc;
        // Disc diameter is the major axis throughout the pipeline.
        let radius = disc.a;
        if (ox - disc.cx).hypot(oy - disc.cy) <= 0.5 * radius {
            onh_hits += 1;
        }
        if let Ok(mac) = localizer::locate_macula(&img, &onh, &cfg.localizer) {
            let (mx, my) = mac.center();
            if (mx - truth.fovea.0).hypot(my - truth.fovea.1) <= 0.5 * 2.0 * radius {
                mac_hits += 1;
            }
        }
    }
    let n = manifest.entries.len() as f64;
    let (onh_rate, mac_rate) = (onh_hits as f64 / n, mac_hits as f64 / n);
    let detail = format!(
        "ONH hit {onh_rate:.3} (>= 0.95), macula hit {mac_rate:.3} (>= 0.90), {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    ensure(onh_rate >= 0.95 && mac_rate >= 0.90, || detail.clone())?;
    within(t0.elapsed(), Duration::from_secs(120))?;
    Ok(detail)
}

fn segmentation(fx: &mut Fixture) -> Check {
    let pred = fx.pred()?;
    let eval_path = fx.root.path().join("eval.json");
    eyas(&["eval", "--corpus", path_str(fx.corpus()), "--pred", path_str(&pred), "--out", path_str(&eval_path)])?;
    let eval: Value = serde_json::from_slice(&std::fs::read(&eval_path).unwrap()).unwrap();
    let seg = &eval["segmentation"];
    let num = |v: &Value| v.as_f64().unwrap_or(f64::NAN);
    let onh = num(&seg["onh"]["mean_iou"]);
    let mac = num(&seg["macula"]["mean_iou"]);
    let vp = num(&seg["vessels"]["mean_precision"]);
    let vr = num(&seg["vessels"]["mean_recall"]);

    // A/V agreement on a noise-free corpus.
    let clean = fx.root.path().join("clean");
    let clean_pred = fx.root.path().join("clean_pred");
    let clean_eval = fx.root.path().join("clean_eval.json");
    eyas(&["gen", "--count", &CORPUS_SIZE.to_string(), "--seed", "42", "--noise", "0", "--out", path_str(&clean)])?;
    eyas(&["analyze", "--input", path_str(&clean.join("images")), "--out", path_str(&clean_pred)])?;
    eyas(&["eval", "--corpus", path_str(&clean), "--pred", path_str(&clean_pred), "--out", path_str(&clean_eval)])?;
    let ce: Value = serde_json::from_slice(&std::fs::read(&clean_eval).unwrap()).unwrap();
    let av = num(&ce["artery_vein"]["mean_accuracy"]);

    let detail = format!(
        "ONH IoU {onh:.3} (>= 0.70), macula IoU {mac:.3} (>= 0.60), vessel precision {vp:.3} / recall {vr:.3} (>= 0.60), A/V {av:.3} (>= 0.90 at noise 0)"
    );
    ensure(onh >= 0.70 && mac >= 0.60 && vp >= 0.60 && vr >= 0.60 && av >= 0.90, || detail.clone())?;
    Ok(detail)
}

fn format_ordering(fx: &mut Fixture) -> Check {
    let out = fx.root.path().join("formats.json");
    eyas(&["compare-formats", "--corpus", path_str(fx.corpus()), "--out", path_str(&out)])?;
    let report: classifier::FormatReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let acc = |f: InputFormat| report.row(f).map(|r| r.accuracy).ok_or_else(|| format!("no {} row", f.as_str()));
    let (image, local, mask, both) = (
        acc(InputFormat::Image)?,
        acc(InputFormat::LocalOnh)?,
        acc(InputFormat::Mask)?,
        acc(InputFormat::MaskPlusLocal)?,
    );
    for r in &report.formats {
        ensure(!r.per_class.is_empty() && r.n > 0, || format!("{} lacks per-class accuracy", r.format.as_str()))?;
    }
    let detail = format!(
        "holdout n={}: image {image:.3}, local_onh {local:.3}, mask {mask:.3}, mask_plus_local {both:.3}; per-class present",
        report.formats[0].n
    );
    ensure(mask >= image && both >= local, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Runtime::new().unwrap()
}

fn server_config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        client_port: 0,
        internal_port: 0,
        service_ports: ServiceName::ALL.iter().map(|&s| (s, 0)).collect(),
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    }
}

struct Served {
    job: Value,
    masks: BTreeMap<&'static str, Vec<u8>>,
    report_txt: Option<Vec<u8>>,
}

async fn submit_all(srv: &RunningServer, images: &[Vec<u8>]) -> Result<Vec<Served>, String> {
    let c = reqwest::Client::new();
    let base = srv.client_url();
    let posts = images.iter().map(|png| {
        let (c, base, png) = (c.clone(), base.clone(), png.clone());
        async move {
            let r = c.post(format!("{base}/api/v1/analyses")).body(png).send().await;
            let v: Value = r.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
            v["job_id"].as_str().map(str::to_string).ok_or_else(|| format!("submit rejected: {v}"))
        }
    });
    let ids: Vec<String> = futures_join(posts).await.into_iter().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for id in ids {
        let deadline = Instant::now() + Duration::from_secs(600);
        let job = loop {
            let v: Value = c
                .get(format!("{base}/api/v1/analyses/{id}"))
                .send()
                .await
                .map_err(|e| e.to_string())?
                .json()
                .await
                .map_err(|e| e.to_string())?;
            match v["job"]["state"].as_str() {
                Some("done") | Some("failed") => break v,
                Some(_) if Instant::now() < deadline => tokio::time::sleep(Duration::from_millis(100)).await,
                s => return Err(format!("job {id} lost or stuck: {s:?}")),
            }
        };
        let mut masks = BTreeMap::new();
        for (s, file) in [("onh", ONH_MASK_FILE), ("macula", MACULA_MASK_FILE), ("vessels", VESSEL_MASK_FILE)] {
            let r = c
                .get(format!("{base}/api/v1/analyses/{id}/structures/{s}/mask.png"))
                .send()
                .await
                .map_err(|e| e.to_string())?;
            if r.status().is_success() {
                masks.insert(file, r.bytes().await.map_err(|e| e.to_string())?.to_vec());
            }
        }
        let r = c
            .get(format!("{base}/api/v1/analyses/{id}/report?format=txt"))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let report_txt = match r.status().is_success() {
            true => Some(r.bytes().await.map_err(|e| e.to_string())?.to_vec()),
            false => None,
        };
        out.push(Served { job, masks, report_txt });
    }
    Ok(out)
}

/// Runs futures concurrently on the current runtime.
async fn futures_join<F: std::future::Future + Send + 'static>(fs: impl IntoIterator<Item = F>) -> Vec<F::Output>
where
    F::Output: Send + 'static,
{
    let handles: Vec<_> = fs.into_iter().map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.expect("task"));
    }
    out
}

/// Compares served outputs with the offline CLI outputs of the same entries.
fn compare_with_offline(pred: &Path, ids: &[String], served: &[Served]) -> Result<(), String> {
    for (id, s) in ids.iter().zip(served) {
        for file in [ONH_MASK_FILE, MACULA_MASK_FILE, VESSEL_MASK_FILE] {
            let offline = std::fs::read(pred.join(id).join(file)).ok();
            ensure(offline.as_ref() == s.masks.get(file), || format!("{id}/{file} differs from offline output"))?;
        }
        let offline = std::fs::read(pred.join(id).join(REPORT_TXT_FILE)).ok();
        ensure(offline == s.report_txt, || format!("{id}/{REPORT_TXT_FILE} differs from offline output"))?;
    }
    Ok(())
}

fn corpus_images(fx: &Fixture, n: usize) -> (Vec<String>, Vec<Vec<u8>>) {
    let m = fx.manifest();
    let entries = &m.entries[..n];
    let ids = entries.iter().map(|e| e.id.clone()).collect();
    let images = entries.iter().map(|e| std::fs::read(fx.corpus().join(&e.image)).unwrap()).collect();
    (ids, images)
}

fn cross_analysis_invariance(fx: &mut Fixture) -> Check {
    let cfg = AnalysisConfig::default();
    let params = GenParams::standard().with_noise(0.0);
    let registry = eyas_core::segmenter::Registry::with_builtins(&cfg.segmenter);
    let [o, m, v] = registry.resolve_each(None).map_err(|e| e.to_string())?;
    let backends = pipeline::Backends { onh: o.as_ref(), macula: m.as_ref(), vessels: v.as_ref() };
    let mut worst = 0.0f64;
    for i in 0..10 {
        let scene = gen_scene(&params, scene_seed(SEED, i)).map_err(|e| e.to_string())?;
        let mut findings = Vec::new();
        for s in [scene.clone(), scene.scaled(1.5)] {
            let (img, _) = render(&s).map_err(|e| e.to_string())?;
            let a = pipeline::analyze_image(&img, backends, &cfg);
            findings.push(a.vessel_findings.map_err(|e| format!("scene {i}: {e}"))?);
        }
        let (base, scaled) = (&findings[0], &findings[1]);
        let (cb, cs) = match (base.normalized_artery_caliber, scaled.normalized_artery_caliber) {
            (Some(b), Some(s)) => (b, s),
            _ => return Err(format!("scene {i}: caliber not normalized")),
        };
        let rel = (cs - cb).abs() / cb;
        worst = worst.max(rel);
        ensure(rel <= 0.05, || format!("scene {i}: normalized caliber {cb:.4} -> {cs:.4} ({:.1}%)", rel * 100.0))?;
        ensure(base.caliber == scaled.caliber, || {
            format!("scene {i}: class {} -> {}", base.caliber, scaled.caliber)
        })?;
    }

    // Disc service down: the vessel section must say why it is not normalized.
    let dir = fx.root.path().join("inject");
    let mut scfg = server_config(&dir);
    scfg.inject_failures = vec![ServiceName::Onh];
    let (_, images) = corpus_images(fx, 1);
    let served = runtime().block_on(async {
        let srv = start(scfg, Mode::SingleProcess).await.map_err(|e| e.to_string())?;
        let r = submit_all(&srv, &images).await;
        srv.stop().await;
        r
    })?;
    let job = &served[0].job;
    let caliber = &job["report"]["sections"]["vessels"]["caliber"];
    ensure(job["job"]["structures"]["onh"]["state"] == "failed", || "injected disc failure did not fail".into())?;
    ensure(*caliber == CaliberLabel::Indeterminate.to_string(), || format!("caliber {caliber}"))?;
    let text = job["report"]["text"].as_str().unwrap_or_default();
    ensure(text.contains("Vessels: caliber not normalized (optic disc unavailable)"), || text.to_string())?;
    Ok(format!(
        "10 scenes x1.5: worst caliber change {:.2}% (<= 5%), classes unchanged; disc failure -> indeterminate with sentence",
        worst * 100.0
    ))
}

fn mode_equivalence(fx: &mut Fixture) -> Check {
    let pred = fx.pred()?;
    let (ids, images) = corpus_images(fx, 10);
    for (label, multi) in [("single-process", false), ("multi-process", true)] {
        let dir = fx.root.path().join(format!("modes-{label}"));
        let cfg = server_config(&dir);
        let mode = match multi {
            false => Mode::SingleProcess,
            true => Mode::MultiProcess {
                exe: PathBuf::from(env!("CARGO_BIN_EXE_eyas")),
                config_path: Some(write_config(&dir, &cfg)),
            },
        };
        let served = runtime().block_on(async {
            let srv = start(cfg, mode).await.map_err(|e| e.to_string())?;
            let r = submit_all(&srv, &images).await;
            srv.stop().await;
            r
        })?;
        compare_with_offline(&pred, &ids, &served).map_err(|e| format!("{label}: {e}"))?;
    }
    Ok("10 images: CLI, single-process and multi-process masks and report text byte-identical".into())
}

fn write_config(dir: &Path, cfg: &ServiceConfig) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn load(fx: &mut Fixture) -> Check {
    let pred = fx.pred()?;
    let (ids, images) = corpus_images(fx, 16);
    let dir = fx.root.path().join("load");
    let t0 = Instant::now();
    let served = runtime().block_on(async {
        let srv = start(server_config(&dir), Mode::SingleProcess).await.map_err(|e| e.to_string())?;
        let r = submit_all(&srv, &images).await;
        srv.stop().await;
        r
    })?;
    ensure(served.len() == 16, || format!("{} of 16 jobs returned", served.len()))?;
    let done = served.iter().filter(|s| s.job["job"]["state"] == "done").count();
    compare_with_offline(&pred, &ids, &served)?;
    Ok(format!(
        "16 concurrent jobs finished ({done} done, {} failed) in {:.1}s; served masks match offline",
        16 - done,
        t0.elapsed().as_secs_f64()
    ))
}

fn golden_reports() -> Check {
    #[derive(serde::Deserialize)]
    struct Case {
        name: String,
        image_id: String,
        sections: Sections,
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let cases: Vec<Case> =
        serde_json::from_slice(&std::fs::read(dir.join("cases.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(cases.len() == 5, || format!("{} cases", cases.len()))?;
    let mut first = None;
    for c in cases {
        let r = synthesize(&c.image_id, c.sections, BTreeMap::new(), &ReportTemplates::default()).map_err(|e| e.to_string())?;
        for (ext, format) in [("txt", ExportFormat::Txt), ("json", ExportFormat::Json)] {
            let golden = std::fs::read(dir.join(format!("{}.{ext}", c.name))).map_err(|e| e.to_string())?;
            ensure(golden == render_export(&r, format), || format!("{}.{ext} differs", c.name))?;
        }
        first.get_or_insert(r);
    }
    let approved = approve(first.as_ref().unwrap(), None).map_err(|e| e.to_string())?;
    ensure(approve(&approved, None).is_err(), || "second approval accepted".into())?;
    Ok("5 golden reports byte-identical; double approval rejected".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut fx = Fixture::new();
    type Criterion = (&'static str, fn(&mut Fixture) -> Check);
    let criteria: [Criterion; 9] = [
        ("metrics_oracle", |_| metrics_oracle()),
        ("ellipse_fit", |_| ellipse_fit()),
        ("localization", localization),
        ("segmentation", segmentation),
        ("format_ordering", format_ordering),
        ("cross_analysis_invariance", cross_analysis_invariance),
        ("mode_equivalence", mode_equivalence),
        ("load", load),
        ("golden_reports", |_| golden_reports()),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut fx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

