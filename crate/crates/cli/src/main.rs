//! `tinydeploy`: compile graphs to C, simulate compiled artifacts and
//! generate model graphs. Exit codes are listed in [`Failure::code`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tinydeploy::backend::{emit, Program};
use tinydeploy::frontend::Scenario;
use tinydeploy::ir::{parse_graph, serialize_graph, validate, Graph};
use tinydeploy::memalloc::{mem_report, Budget};
use tinydeploy::pipeline::{compile, CompileOptions};
use tinydeploy::sim::run;
use tinydeploy::target::{load_target, TargetDescription};
use tinydeploy::zoo::{build_encoder_layer_seeded, build_gemm_chain, build_identity, build_llama, sample_inputs, LlamaConfig, Mode};

const SOLVER_LOG: &str = "solver.log";
const OUTPUTS: &str = "outputs.bin";
const GRAPH_FILE: &str = "graph.json";
const GRAPH_WEIGHTS: &str = "graph.weights";

#[derive(Parser)]
#[command(name = "tinydeploy", version, about = "Deploy quantized networks on heterogeneous microcontrollers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a graph into C sources, a memory manifest and a plan.
    Compile(CompileArgs),
    /// Simulate a compiled artifact on a set of inputs.
    Run(RunArgs),
    /// Write a model graph and its weights.
    Generate {
        #[command(subcommand)]
        model: Model,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Mem,
    Cycles,
    Cp,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Weight blob; defaults to the graph path with a `.weights` extension.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Target description file, or the name of a built-in preset.
    #[arg(long, default_value = "siracusa-like")]
    target: String,
    #[arg(long, default_value = "single-core", value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, value_enum, default_value = "on")]
    double_buffer: OnOff,
    /// Seed of the solver's tie-breaking.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60_000)]
    budget_ms: u64,
    /// Reports printed to stdout after compiling.
    #[arg(long, value_enum)]
    report: Vec<Report>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `compile`.
    #[arg(long)]
    artifact: PathBuf,
    /// Raw bytes of every graph input, concatenated in input order.
    #[arg(long)]
    inputs: PathBuf,
    /// Overrides the target the artifact was compiled for.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    report: Vec<Report>,
    /// Where outputs and reports go; defaults to the artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenOut {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write sample inputs drawn from this seed to `inputs.bin`.
    #[arg(long)]
    inputs_seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeFlag {
    Parallel,
    Autoregressive,
}

#[derive(Subcommand)]
enum Model {
    /// Decoder stack; defaults are the tiny configuration.
    Llama {
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: ModeFlag,
        /// New tokens in parallel mode.
        #[arg(long, default_value_t = 1)]
        seq: usize,
        /// Cached tokens in autoregressive mode.
        #[arg(long, default_value_t = 0)]
        past: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        heads: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[command(flatten)]
        out: GenOut,
    },
    /// One encoder layer.
    Encoder {
        #[arg(long, default_value_t = 32)]
        seq: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        heads: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[command(flatten)]
        out: GenOut,
    },
    /// Chain of requantized matrix products.
    Chain {
        #[arg(long, default_value_t = 16)]
        rows: usize,
        /// Feature sizes, input first.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
        dims: Vec<usize>,
        #[command(flatten)]
        out: GenOut,
    },
    /// A single int8 tensor passed through unchanged.
    Identity {
        #[arg(long, value_delimiter = ',', default_values_t = [16])]
        shape: Vec<usize>,
        #[command(flatten)]
        out: GenOut,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}

/// Failure classes and their stable exit codes.
#[derive(Debug)]
enum Failure {
    /// 1: a bug or an unexpected state.
    Internal(String),
    /// 2: bad flags or configuration.
    Usage(String),
    /// 3: a file is missing, unreadable or malformed.
    Input(String),
    /// 4: nothing fits the target's memories.
    Infeasible(String),
    /// 5: the simulator or an artifact consistency check failed.
    Simulation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
            Failure::Infeasible(_) => 4,
            Failure::Simulation(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Internal(m) | Failure::Usage(m) | Failure::Input(m) | Failure::Infeasible(m) | Failure::Simulation(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, data).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Internal(format!("{}: {e}", dir.display())))
}

fn target(spec: &str) -> Result<TargetDescription, Failure> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = String::from_utf8(read(path)?).map_err(|e| Failure::Input(format!("{spec}: {e}")))?;
        return load_target(&text).map_err(|e| Failure::Input(format!("{spec}: {e}")));
    }
    TargetDescription::preset(spec)
        .map_err(|e| Failure::Input(format!("`{spec}` is neither a target file nor a preset: {e}")))
}

fn load_graph(graph: &Path, weights: Option<&Path>) -> Result<Graph, Failure> {
    let text = String::from_utf8(read(graph)?).map_err(|e| Failure::Input(format!("{}: {e}", graph.display())))?;
    let wpath = weights.map(Path::to_path_buf).unwrap_or_else(|| graph.with_extension("weights"));
    let blob = if weights.is_some() || wpath.exists() { read(&wpath)? } else { Vec::new() };
    parse_graph(&text, &blob).map_err(|e| Failure::Input(format!("{}: {e}", graph.display())))
}

fn cmd_compile(a: CompileArgs) -> Outcome {
    let g = load_graph(&a.graph, a.weights.as_deref())?;
    let t = target(&a.target)?;
    let opts = CompileOptions {
        scenario: a.scenario,
        double_buffer: a.double_buffer == OnOff::On,
        budget: Budget {
            time_ms: a.budget_ms,
            seed: a.seed,
            ..Budget::default()
        },
    };
    log::info!("compiling `{}` for `{}` ({})", g.name, t.name, a.scenario);
    let c = match compile(&g, &t, opts) {
        Ok(c) => c,
        Err(e) if e.is_infeasible() => {
            let mut msg = format!("infeasible: {e}\n");
            for l in &t.levels {
                let _ = writeln!(msg, "  level {} capacity {}", l.name, l.capacity);
            }
            return Err(Failure::Infeasible(msg.trim_end().to_string()));
        }
        Err(e) => {
            let msg = e.to_string();
            return Err(match e {
                tinydeploy::pipeline::CompileError::Graph(_) => Failure::Input(msg),
                _ => Failure::Internal(msg),
            });
        }
    };
    log::info!("solved in {:?}, optimal {}", c.elapsed, c.tiling.optimal);
    let art = emit(&c.program).map_err(|e| Failure::Internal(e.to_string()))?;
    make_dir(&a.out)?;
    art.write(&a.out).map_err(|e| Failure::Internal(e.to_string()))?;
    c.program.save(&a.out).map_err(|e| Failure::Internal(e.to_string()))?;
    write(&a.out.join(SOLVER_LOG), c.solver_log())?;
    for r in &a.report {
        match r {
            Report::Mem => print!("{}", mem_report(&c.memory)),
            Report::Cycles => print!("{}", tinydeploy::sim::cycle_model(&c.program, &t).table()),
            Report::Cp => print!("{}", c.solver_log()),
        }
    }
    println!(
        "wrote {} ({} steps, peak {})",
        a.out.display(),
        c.program.steps.len(),
        c.memory.levels.iter().map(|(l, m)| format!("{l}={}", m.peak)).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

/// Checks the manifest on disk against the plan: every row must name a
/// placement of the plan at the same spot and fit its level.
fn check_manifest(dir: &Path, p: &Program, t: &TargetDescription) -> Outcome {
    let art = emit(p).map_err(|e| Failure::Simulation(e.to_string()))?;
    let path = dir.join(art.manifest_file());
    let text = String::from_utf8(read(&path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let rows = art.manifest_rows();
    let mut on_disk = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = match f.as_slice() {
            [s, l, o, n] => o.parse::<usize>().ok().zip(n.parse::<usize>().ok()).map(|(o, n)| (s.to_string(), l.to_string(), o, n)),
            _ => None,
        };
        let row = parsed.ok_or_else(|| Failure::Simulation(format!("manifest line {}: malformed `{line}`", i + 1)))?;
        let cap = t
            .level(&row.1)
            .ok_or_else(|| Failure::Simulation(format!("manifest line {}: unknown level `{}`", i + 1, row.1)))?
            .capacity;
        if row.2 + row.3 > cap {
            return Err(Failure::Simulation(format!(
                "manifest line {}: `{}` ends at {} but level `{}` has capacity {cap}",
                i + 1,
                row.0,
                row.2 + row.3,
                row.1
            )));
        }
        on_disk.push(row);
    }
    if on_disk != rows {
        let diff = on_disk
            .iter()
            .zip(&rows)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("`{}` at {}+{} in {} but the plan has `{}` at {}+{} in {}", a.0, a.2, a.3, a.1, b.0, b.2, b.3, b.1))
            .unwrap_or_else(|| format!("{} rows, the plan has {}", on_disk.len(), rows.len()));
        return Err(Failure::Simulation(format!("manifest disagrees with the plan: {diff}")));
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Outcome {
    let p = Program::load(&a.artifact).map_err(|e| Failure::Input(format!("{}: {e}", a.artifact.display())))?;
    let t = match &a.target {
        Some(s) => target(s)?,
        None => p.target.clone(),
    };
    check_manifest(&a.artifact, &p, &t)?;
    let blob = read(&a.inputs)?;
    let mut inputs = BTreeMap::new();
    let mut at = 0;
    for name in &p.inputs {
        let b = p.buffer(name).ok_or_else(|| Failure::Input(format!("input `{name}` is not in the plan")))?;
        let chunk = blob.get(at..at + b.bytes).ok_or_else(|| {
            Failure::Input(format!("{}: {} bytes, inputs need {}", a.inputs.display(), blob.len(), at + b.bytes))
        })?;
        inputs.insert(name.clone(), chunk.to_vec());
        at += b.bytes;
    }
    if at != blob.len() {
        return Err(Failure::Input(format!("{}: {} bytes, inputs need {at}", a.inputs.display(), blob.len())));
    }
    let r = run(&p, &inputs, &t).map_err(|e| Failure::Simulation(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| a.artifact.clone());
    make_dir(&out)?;
    let mut bytes = Vec::new();
    for name in &p.outputs {
        bytes.extend_from_slice(&r.outputs[name]);
    }
    write(&out.join(OUTPUTS), &bytes)?;
    let mut mem = String::new();
    for l in &p.levels {
        let cap = t.level(&l.name).map(|x| x.capacity).unwrap_or(0);
        let _ = writeln!(mem, "{}\tpeak {}\tplanned {}\tcapacity {}", l.name, r.trace.peak(&l.name), l.peak, cap);
    }
    let _ = writeln!(mem, "transfers {}", r.trace.transfers.len());
    write(&out.join("mem.txt"), &mem)?;
    let cycles = r.cycles.table();
    write(&out.join("cycles.txt"), &cycles)?;
    for rep in &a.report {
        match rep {
            Report::Mem => print!("{mem}"),
            Report::Cycles => print!("{cycles}"),
            Report::Cp => print!("{}", fs::read_to_string(a.artifact.join(SOLVER_LOG)).unwrap_or_default()),
        }
    }
    println!("{} outputs, {} bytes, {} cycles", p.outputs.len(), bytes.len(), r.cycles.total);
    Ok(())
}

fn write_graph(g: &Graph, o: &GenOut) -> Outcome {
    let diags = validate(g);
    if !diags.is_empty() {
        return Err(Failure::Internal(format!("generated graph is invalid: {diags:?}")));
    }
    make_dir(&o.out)?;
    let (text, blob) = serialize_graph(g);
    write(&o.out.join(GRAPH_FILE), text)?;
    write(&o.out.join(GRAPH_WEIGHTS), blob)?;
    if let Some(seed) = o.inputs_seed {
        let inputs = sample_inputs(g, seed);
        let bytes: Vec<u8> = g.inputs.iter().flat_map(|n| inputs[n].to_bytes()).collect();
        write(&o.out.join("inputs.bin"), bytes)?;
    }
    println!("{}: {} nodes, {} buffers", g.name, g.nodes.len(), g.buffers().count());
    Ok(())
}

fn cmd_generate(m: Model) -> Outcome {
    let usage = |e: &dyn std::fmt::Display| Failure::Usage(e.to_string());
    match m {
        Model::Llama { layers, mode, seq, past, d_model, heads, d_ff, out } => {
            let mode = match mode {
                ModeFlag::Parallel => Mode::Parallel { seq },
                ModeFlag::Autoregressive => Mode::Autoregressive { past },
            };
            let mut cfg = LlamaConfig::tiny(mode);
            cfg.layers = layers;
            cfg.d_model = d_model;
            cfg.heads = heads;
            cfg.d_ff = d_ff;
            cfg.seed = out.seed;
            cfg.check().map_err(|e| usage(&e))?;
            let g = build_llama(&cfg).map_err(|e| usage(&e))?;
            write_graph(&g, &out)
        }
        Model::Encoder { seq, d_model, heads, d_ff, out } => {
            let g = build_encoder_layer_seeded(d_model, heads, d_ff, seq, out.seed).map_err(|e| usage(&e))?;
            write_graph(&g, &out)
        }
        Model::Chain { rows, dims, out } => {
            let g = build_gemm_chain(rows, &dims, out.seed).map_err(|e| usage(&e))?;
            write_graph(&g, &out)
        }
        Model::Identity { shape, out } => {
            if shape.is_empty() || shape.contains(&0) {
                return Err(Failure::Usage("identity shape must be non-empty with positive sizes".into()));
            }
            write_graph(&build_identity(shape), &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TINYDEPLOY_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Generate { model } => cmd_generate(model),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
