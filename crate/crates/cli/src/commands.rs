use std::fs;
use std::path::{Path, PathBuf};

use protoreg::attention::{attention_weights, cross_attention, fusion_attention, TokenMatrix, WindowLayout};
use protoreg::gradients::check_all_terms;
use protoreg::grid::Dims;
use protoreg::io;
use protoreg::losses::LossWeights;
use protoreg::metrics::{evaluate, warp_labels, EvalReport, EvalRow};
use protoreg::optim::{register_pair, LabelSource, RegistrationConfig, RegistrationResult};
use protoreg::phantom::{generate, PhantomSpec};
use protoreg::volume::LabelVolume;
use protoreg::warp::{sdlogj, warp_volume};
use serde::Serialize;

use crate::cli::*;
use crate::exit::{CliError, CliResult};
use crate::manifest::{file_record, records, unix_now, write_atomic, FileRecord, RunManifest};
use crate::slices::{render, Axis};

pub const UNSUPERVISED_WARNING: &str = "unsupervised mode: ω₃,ω₄,ω₅ disabled";

pub const FIELD: &str = "field.f32raw";
pub const WARPED: &str = "warped.f32raw";
pub const WARPED_LABELS: &str = "warped_labels.f32raw";
pub const LOSS: &str = "loss_breakdown.json";
pub const REPORT: &str = "eval_report.json";
pub const MANIFEST: &str = "manifest.json";

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Config file or preset, then each flag on top.
pub fn resolve_config(args: &ConfigArgs, fallback: Preset) -> CliResult<RegistrationConfig> {
    let mut c = match (&args.config, args.preset.unwrap_or(fallback)) {
        (Some(path), _) => RegistrationConfig::from_json(&read_text(path)?)?,
        (None, Preset::Default) => RegistrationConfig::default(),
        (None, Preset::Phantom) => RegistrationConfig::phantom(),
    };
    if let Some(l) = args.levels {
        c.levels = l;
        if args.iterations.is_none() {
            let last = c.iterations.last().copied().unwrap_or(100);
            c.iterations.resize(l, last);
        }
    }
    if let Some(it) = &args.iterations {
        c.iterations = it.clone();
    }
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut c.adam.learning_rate, args.learning_rate);
    set(&mut c.adam.beta1, args.beta1);
    set(&mut c.adam.beta2, args.beta2);
    set(&mut c.adam.epsilon, args.adam_epsilon);
    set(&mut c.weights.sim, args.w_sim);
    set(&mut c.weights.smooth, args.w_smooth);
    set(&mut c.weights.seg, args.w_seg);
    set(&mut c.weights.prototype, args.w_prototype);
    set(&mut c.weights.contour, args.w_contour);
    set(&mut c.temperature, args.temperature);
    if let Some(w) = args.lncc_window {
        c.lncc_window = w;
    }
    if let Some(n) = args.contour_max_points {
        c.contour_max_points = n;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

/// Reads a label file only when the registration asks for it.
struct LabelFile(PathBuf);

impl LabelSource for LabelFile {
    fn load(&self) -> protoreg::Result<LabelVolume> {
        io::read_labels(&self.0)
    }
}

fn placeholder_row(pair_id: &str, result: &RegistrationResult) -> EvalRow {
    EvalRow {
        pair_id: pair_id.to_string(),
        stage: "registered".into(),
        classes: Vec::new(),
        avg_dsc: None,
        dsc_std: None,
        sdlogj: result.sdlogj.value,
        sdlogj_excluded: result.sdlogj.excluded,
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or("pair").to_string()
}

pub struct RegisterOutcome {
    pub result: RegistrationResult,
    pub manifest: RunManifest,
}

pub fn register(args: &RegisterArgs) -> CliResult<RegisterOutcome> {
    let config = resolve_config(&args.config, Preset::Default)?;
    let masks = match (&args.fixed_mask, &args.moving_mask) {
        (Some(f), Some(m)) => Some((LabelFile(f.clone()), LabelFile(m.clone()))),
        (None, None) => None,
        _ => return Err(CliError::args("--fixed-mask and --moving-mask must be given together")),
    };
    let started = unix_now();
    let fixed = io::read_volume(&args.fixed)?;
    let moving = io::read_volume(&args.moving)?;
    if masks.is_none() && config.weights.uses_masks() {
        eprintln!("warning: {UNSUPERVISED_WARNING}");
    }
    let result = match &masks {
        Some((f, m)) => register_pair(&fixed, &moving, Some(f), Some(m), &config)?,
        None => register_pair(&fixed, &moving, None, None, &config)?,
    };

    let out = &args.out_dir;
    create_dir(out)?;
    let pair_id = stem(&args.moving);
    // (role, path, is a volume file)
    let mut outputs: Vec<(&str, PathBuf, bool)> = Vec::new();

    let field_path = out.join(FIELD);
    io::write_field(&result.field, &field_path)?;
    outputs.push(("field", field_path, true));

    let warped_path = out.join(WARPED);
    io::write_volume(&warp_volume(&moving, &result.field)?, &warped_path)?;
    outputs.push(("warped", warped_path, true));

    let mut report = EvalReport::default();
    match &masks {
        Some((f, m)) => {
            let fixed_labels = f.load()?;
            let warped = warp_labels(&m.load()?, &result.field)?;
            let labels_path = out.join(WARPED_LABELS);
            io::write_labels(&warped, &labels_path)?;
            outputs.push(("warped_labels", labels_path, true));
            report.push(evaluate(&pair_id, "registered", &fixed_labels, &warped, &result.field, &[])?);
        }
        None => report.push(placeholder_row(&pair_id, &result)),
    }

    let loss_path = out.join(LOSS);
    write_file(&loss_path, result.final_loss.to_json().as_bytes())?;
    outputs.push(("loss_breakdown", loss_path, false));

    let report_path = out.join(REPORT);
    write_file(&report_path, report.to_json().as_bytes())?;
    outputs.push(("eval_report", report_path, false));

    let mut inputs: Vec<FileRecord> = Vec::new();
    inputs.extend(records("fixed", &args.fixed)?);
    inputs.extend(records("moving", &args.moving)?);
    if let Some((f, m)) = &masks {
        inputs.extend(records("fixed_mask", &f.0)?);
        inputs.extend(records("moving_mask", &m.0)?);
    }
    let mut out_records = Vec::new();
    for (role, path, volume) in &outputs {
        if *volume {
            out_records.extend(records(role, path)?);
        } else {
            out_records.push(file_record(role, path)?);
        }
    }
    let manifest = RunManifest {
        tool: "protoreg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "register".into(),
        seed: config.seed,
        config: serde_json::to_value(&config).expect("config serializes"),
        inputs,
        outputs: out_records,
        started_unix: started,
        finished_unix: unix_now(),
    };
    manifest.write(&out.join(MANIFEST))?;
    Ok(RegisterOutcome { result, manifest })
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let fixed = io::read_labels(&args.fixed_mask)?;
    let warped = io::read_labels(&args.warped_mask)?;
    let field = io::read_field(&args.field)?;
    let mut report = EvalReport::default();
    report.push(evaluate(&stem(&args.warped_mask), "eval", &fixed, &warped, &field, &[])?);
    write_file(&args.out, report.to_csv().as_bytes())?;
    write_file(&args.out.with_extension("json"), report.to_json().as_bytes())?;
    Ok(report)
}

pub fn load_phantom_spec(path: Option<&Path>) -> CliResult<PhantomSpec> {
    match path {
        Some(p) => Ok(PhantomSpec::from_json(&read_text(p)?)?),
        None => Ok(PhantomSpec::default()),
    }
}

pub fn phantom(args: &PhantomArgs) -> CliResult<Vec<PathBuf>> {
    let mut spec = load_phantom_spec(args.spec.as_deref())?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let p = generate(&spec)?;
    let out = &args.out_dir;
    create_dir(out)?;
    let paths: Vec<PathBuf> = ["fixed", "moving", "fixed_labels", "moving_labels", "truth_field"]
        .iter()
        .map(|n| out.join(format!("{n}.f32raw")))
        .collect();
    io::write_volume(&p.fixed, &paths[0])?;
    io::write_volume(&p.moving, &paths[1])?;
    io::write_labels(&p.fixed_labels, &paths[2])?;
    io::write_labels(&p.moving_labels, &paths[3])?;
    io::write_field(&p.truth, &paths[4])?;
    let spec_path = out.join("phantom_spec.json");
    write_file(&spec_path, serde_json::to_string_pretty(&spec).expect("spec serializes").as_bytes())?;
    Ok(paths)
}

pub fn check_grad(args: &CheckGradArgs) -> CliResult<String> {
    if args.size < 3 {
        return Err(CliError::args("--size must be at least 3"));
    }
    let reports = check_all_terms(args.size, args.probes, args.eps, args.seed)?;
    let mut table = format!(
        "{:<10} {:>6} {:>9} {:>12} {:>12}  result\n",
        "term", "probes", "resampled", "max_abs", "max_rel"
    );
    let mut failed = Vec::new();
    for (term, r) in &reports {
        let ok = r.probes >= args.probes && r.passes(args.tolerance);
        if !ok {
            failed.push(term.name());
        }
        table.push_str(&format!(
            "{:<10} {:>6} {:>9} {:>12.3e} {:>12.3e}  {}\n",
            term.name(),
            r.probes,
            r.resampled,
            r.max_abs_err,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        ));
    }
    if failed.is_empty() {
        Ok(table)
    } else {
        print!("{table}");
        Err(CliError::numerical(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn fmt_matrix(m: &TokenMatrix) -> String {
    (0..m.rows())
        .map(|i| {
            let cells: Vec<String> = m.row(i).iter().map(|v| format!("{v:>8.4}")).collect();
            format!("  [{}]\n", cells.join(" "))
        })
        .collect()
}

pub fn demo_attention() -> CliResult<String> {
    use std::fmt::Write;
    let mut s = String::new();
    let img = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?;
    let mask = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.5]])?;
    let _ = writeln!(s, "image tokens (Q for the first direction):\n{}", fmt_matrix(&img));
    let _ = writeln!(s, "mask tokens:\n{}", fmt_matrix(&mask));
    let w = attention_weights(&img, &mask)?;
    let _ = writeln!(s, "softmax(Q Kᵀ / √d), image → mask (rows sum to 1):\n{}", fmt_matrix(&w));
    let _ = writeln!(s, "image attends to mask:\n{}", fmt_matrix(&cross_attention(&img, &mask, &mask)?));
    let _ = writeln!(s, "mask attends to image:\n{}", fmt_matrix(&cross_attention(&mask, &img, &img)?));
    let _ = writeln!(s, "fusion (mean of both directions):\n{}", fmt_matrix(&fusion_attention(&img, &mask)?));

    let grid = Dims::new(4, 4, 1);
    let _ = writeln!(s, "4x4 grid, window 2, cells as (x,y):");
    for (name, layout) in [
        ("plain", WindowLayout::new(grid, 2, 0)?),
        ("shifted by 1", WindowLayout::shifted(grid, 2)?),
    ] {
        let _ = writeln!(s, "  {name}:");
        for win in 0..layout.num_windows() {
            let cells: Vec<String> = (0..layout.window_len())
                .map(|slot| {
                    let p = grid.coords(layout.source(win, slot));
                    format!("({},{})", p[0], p[1])
                })
                .collect();
            let _ = writeln!(s, "    window {win}: {}", cells.join(" "));
        }
    }
    Ok(s)
}

pub fn slices(args: &SlicesArgs) -> CliResult<()> {
    let axis = Axis::parse(&args.axis)?;
    let vol = io::read_volume(&args.volume)?;
    let labels = args.labels.as_deref().map(io::read_labels).transpose()?;
    let img = render(&vol, labels.as_ref(), axis, args.index)?;
    write_file(&args.out, &img.to_ppm())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: &'static str,
    pub prototype: bool,
    pub contour: bool,
    pub dsc: f64,
    pub sdlogj: f64,
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,prototype,contour,dsc,sdlogj\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.config,
            mark(r.prototype),
            mark(r.contour),
            r.dsc,
            r.sdlogj
        ));
    }
    s
}

/// Baseline, then prototype, then prototype and contour, all on one pair.
pub fn run_ablation(spec: &PhantomSpec, base: &RegistrationConfig) -> CliResult<Vec<AblationRow>> {
    let p = generate(spec)?;
    let w = base.weights;
    let grid = [
        ("baseline", false, false),
        ("+prototype", true, false),
        ("+prototype+contour", true, true),
    ];
    grid.iter()
        .map(|&(name, proto, contour)| {
            let weights = LossWeights {
                prototype: if proto { w.prototype } else { 0.0 },
                contour: if contour { w.contour } else { 0.0 },
                ..w
            };
            let cfg = RegistrationConfig {
                weights,
                ..base.clone()
            };
            let r = register_pair(&p.fixed, &p.moving, Some(&p.fixed_labels), Some(&p.moving_labels), &cfg)?;
            let warped = warp_labels(&p.moving_labels, &r.field)?;
            let row = evaluate("phantom", name, &p.fixed_labels, &warped, &r.field, &[])?;
            Ok(AblationRow {
                config: name,
                prototype: proto,
                contour,
                dsc: row.avg_dsc.unwrap_or(f64::NAN),
                sdlogj: sdlogj(&r.field).value,
            })
        })
        .collect()
}

pub fn ablate(args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    let spec = load_phantom_spec(args.phantom_spec.as_deref())?;
    let mut cfg = resolve_config(&args.config, Preset::Phantom)?;
    if args.config.seed.is_none() {
        cfg.seed = spec.seed;
    }
    let rows = run_ablation(&spec, &cfg)?;
    write_atomic(&args.out, ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Register(a) => {
            let o = register(&a)?;
            let b = &o.result.final_loss;
            println!(
                "total {:.6}  sdlogj {:.4}  -> {}",
                b.total,
                o.result.sdlogj.value,
                a.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let r = eval(&a)?;
            print!("{}", r.to_csv());
        }
        Command::Phantom(a) => {
            for p in phantom(&a)? {
                println!("{}", p.display());
            }
        }
        Command::CheckGrad(a) => print!("{}", check_grad(&a)?),
        Command::DemoAttention => print!("{}", demo_attention()?),
        Command::Slices(a) => slices(&a)?,
        Command::Ablate(a) => {
            let rows = ablate(&a)?;
            print!("{}", ablation_csv(&rows));
        }
    }
    Ok(())
}
