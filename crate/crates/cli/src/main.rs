use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use gipc::bench::bench_projection;
use gipc::config::SceneConfig;
use gipc::curves::{curve, CurveKind, Table};
use gipc::mesh::write_obj;
use gipc::proximity::min_primitive_distance;
use gipc::solver::{advance_time_step, StepDiagnostics};
use gipc::{Scene, SimState, SolverMode, Vec3};

#[derive(Parser)]
#[command(name = "gipc", version, about = "Implicit contact simulation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene file and write OBJ frames, diagnostics CSV and a summary.
    Run {
        scene: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// gipc or reference-ipc
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SolverMode>,
        /// Output directory (overrides the scene's).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the exhaustive intersection check on emitted frames.
        #[arg(long)]
        no_check: bool,
    },
    /// Sample diagnostic curves to CSV.
    Curves {
        /// barrier, norms, gn-compare or mollifier-eigs
        which: CurveKind,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time analytic against numeric Hessian projection.
    BenchProjection {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "6,9,12")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<SolverMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode '{s}', expected gipc or reference-ipc"))
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn std::io::Write>>> {
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn write_table(t: &Table, out: Option<&Path>) -> Result<()> {
    let mut w = csv_writer(out)?;
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn surface_obj(scene: &Scene, x: &[Vec3]) -> String {
    let topo = &scene.topo;
    let mut local = vec![usize::MAX; x.len()];
    let mut verts = Vec::with_capacity(topo.surface_verts.len());
    for &v in &topo.surface_verts {
        local[v] = verts.len();
        verts.push(x[v]);
    }
    let tris: Vec<[usize; 3]> = topo.surface_tris.iter().map(|t| t.map(|i| local[i])).collect();
    write_obj(&verts, &tris)
}

const DIAG_HEADER: [&str; 11] = [
    "step",
    "newton_iters",
    "pcg_iters_total",
    "min_distance_rel",
    "energy",
    "alpha_min",
    "wall_ms",
    "converged",
    "line_search_failed",
    "num_contacts",
    "min_frame_distance_rel",
];

fn diag_record(d: &StepDiagnostics, frame_dist: Option<f64>) -> Vec<String> {
    vec![
        d.step.to_string(),
        d.newton_iters.to_string(),
        d.pcg_iters_total.to_string(),
        format!("{:e}", d.min_distance_rel),
        format!("{:e}", d.energy),
        format!("{:e}", d.alpha_min),
        format!("{:.3}", d.wall_ms),
        d.converged.to_string(),
        d.line_search_failed.to_string(),
        d.num_contacts.to_string(),
        frame_dist.map(|v| format!("{v:e}")).unwrap_or_default(),
    ]
}

struct RunArgs {
    scene: PathBuf,
    dt: Option<f64>,
    steps: Option<usize>,
    mode: Option<SolverMode>,
    out: Option<PathBuf>,
    check: bool,
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = SceneConfig::from_file(&a.scene)?;
    if let Some(dt) = a.dt {
        cfg.dt = dt;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(m) = a.mode {
        cfg.solver.mode = m;
    }
    let loaded = cfg.load().with_context(|| format!("loading {}", a.scene.display()))?;
    let (scene, solver) = (&loaded.scene, &loaded.solver);
    let out_dir = match a.out {
        Some(d) => d,
        None => a.scene.parent().unwrap_or(Path::new(".")).join(&loaded.outputs.dir),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let mut state = SimState::with_velocities(scene, solver, loaded.velocities.clone())?;
    let l = scene.bbox_diagonal;

    let mut frames = 0usize;
    let mut min_frame = f64::INFINITY;
    let emit = |state: &SimState, frames: &mut usize| -> Result<Option<f64>> {
        let d = if a.check {
            let d = min_primitive_distance(scene, &state.x);
            if !(d > 0.0) {
                bail!("frame at step {} is not intersection-free (min distance {d:e})", state.step);
            }
            Some(d / l)
        } else {
            None
        };
        let path = out_dir.join(format!("frame_{:05}.obj", state.step));
        fs::write(&path, surface_obj(scene, &state.x)).with_context(|| format!("cannot write {}", path.display()))?;
        *frames += 1;
        Ok(d)
    };
    let every = loaded.outputs.obj_every;
    if every > 0 {
        if let Some(d) = emit(&state, &mut frames)? {
            min_frame = min_frame.min(d);
        }
    }

    let csv_path = out_dir.join(&loaded.outputs.csv);
    let mut w = csv_writer(Some(&csv_path))?;
    w.write_record(DIAG_HEADER)?;
    let (mut newton, mut pcg, mut unconverged, mut ls_failed) = (0usize, 0usize, 0usize, 0usize);
    let mut min_dist = f64::INFINITY;
    for _ in 0..loaded.steps {
        let d = advance_time_step(scene, solver, &mut state).with_context(|| format!("step {}", state.step + 1))?;
        newton += d.newton_iters;
        pcg += d.pcg_iters_total;
        unconverged += usize::from(!d.converged);
        ls_failed += usize::from(d.line_search_failed);
        min_dist = min_dist.min(d.min_distance_rel);
        let fd = if every > 0 && state.step % every == 0 {
            emit(&state, &mut frames)?
        } else {
            None
        };
        if let Some(v) = fd {
            min_frame = min_frame.min(v);
        }
        w.write_record(diag_record(&d, fd))?;
        log::info!(
            "step {} newton {} pcg {} contacts {}",
            d.step,
            d.newton_iters,
            d.pcg_iters_total,
            d.num_contacts
        );
    }
    w.flush()?;

    let finite = |v: f64| if v.is_finite() { json!(v) } else { json!(null) };
    let summary = json!({
        "scene": cfg.name,
        "steps": loaded.steps,
        "mode": solver.mode,
        "total_newton_iters": newton,
        "total_pcg_iters": pcg,
        "unconverged_steps": unconverged,
        "line_search_failures": ls_failed,
        "min_contact_distance_rel": finite(min_dist),
        "min_frame_distance_rel": finite(min_frame),
        "frames_checked": a.check,
        "max_penetration": if a.check { json!(0.0) } else { json!(null) },
        "intersection_free": if a.check { json!(true) } else { json!(null) },
        "frames": frames,
        "d_hat": solver.barrier.d_hat,
        "kappa": solver.barrier.kappa,
        "bbox_diagonal": l,
    });
    let sp = out_dir.join("summary.json");
    fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn bench(counts: &[usize], dims: &[usize], seed: u64, out: Option<&Path>) -> Result<()> {
    let mut w = csv_writer(out)?;
    w.write_record(["count", "dim", "analytic_ms", "numeric_ms", "speedup", "max_frobenius_diff"])?;
    for &dim in dims {
        for &count in counts {
            let r = bench_projection(count, dim, seed)?;
            w.write_record([
                r.count.to_string(),
                r.dim.to_string(),
                format!("{:.3}", r.analytic_ms),
                format!("{:.3}", r.numeric_ms),
                format!("{:.3}", r.speedup),
                format!("{:e}", r.max_frobenius_diff),
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            scene,
            dt,
            steps,
            mode,
            out,
            no_check,
        } => run(RunArgs {
            scene,
            dt,
            steps,
            mode,
            out,
            check: !no_check,
        }),
        Command::Curves { which, samples, out } => {
            if samples < 2 {
                Err(anyhow::anyhow!("need at least 2 samples"))
            } else {
                write_table(&curve(which, samples), out.as_deref())
            }
        }
        Command::BenchProjection {
            counts,
            dims,
            seed,
            out,
        } => bench(&counts, &dims, seed, out.as_deref()),
    };
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
