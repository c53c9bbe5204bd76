//! `inferix` command line: generate, serve, eval, profile-overhead.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inferix_core::engine::{
    recompute_reference, EngineEvent, EngineObserver, GeneratedBlock, PipelineRegistry, ToyModel,
};
use inferix_core::kv::KvStats;
use inferix_core::metrics::{evaluate, split_manifest, ChunkedVideo, Split, Weighting};
use inferix_core::wire::Hello;

use crate::config::RunConfig;
use crate::formats;
use crate::profiler::{measure_overhead, HookPoint, Profiler, ReportFormat, SpanGuard, Workload};
use crate::run::{self, Backend};
use crate::stream::{ServeOptions, StreamObserver, StreamServer};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
/// `--verify` tolerance on the max absolute latent difference.
pub const VERIFY_TOLERANCE: f32 = 1e-4;
pub const OVERHEAD_LIMIT: f64 = 1.05;

#[derive(Debug, Parser)]
#[command(name = "inferix", version, about = "Block-diffusion video inference engine")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, env = "INFERIX_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "INFERIX_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "INFERIX_OUT")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a video and write frames, profile and resolved config.
    Generate(GenerateArgs),
    /// Generate while streaming frames to connected clients.
    Serve(ServeArgs),
    /// Score a generated video with the drift metrics.
    Eval(EvalArgs),
    /// Measure profiler overhead on a calibrated workload.
    ProfileOverhead(OverheadArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    #[arg(long, env = "INFERIX_BLOCKS")]
    pub blocks: Option<usize>,
    /// Prompt for chunk 0 (replaces any prompt schedule).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Extra prompt change as CHUNK:TEXT; repeatable.
    #[arg(long = "prompt-at", value_name = "CHUNK:TEXT")]
    pub prompt_at: Vec<String>,
    #[arg(long, env = "INFERIX_WORLD_SIZE")]
    pub world_size: Option<usize>,
    /// auto, ulysses, ring_pass_kv or ring_pass_q.
    #[arg(long, env = "INFERIX_STRATEGY")]
    pub strategy: Option<String>,
    /// lockstep or threaded.
    #[arg(long)]
    pub executor: Option<String>,
    #[arg(long)]
    pub kv_window: Option<usize>,
    #[arg(long)]
    pub no_profile: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also recompute without the cache and check the latents agree.
    #[arg(long)]
    pub verify: bool,
    /// Write the final KV pages to `kv.bin`.
    #[arg(long)]
    pub dump_kv: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, env = "INFERIX_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "INFERIX_WEB_LISTEN")]
    pub web_listen: Option<String>,
    #[arg(long, env = "INFERIX_CLIENT_QUEUE")]
    pub client_queue: Option<usize>,
    /// Static files served under /console on the web endpoint.
    #[arg(long, env = "INFERIX_CONSOLE_DIR")]
    pub console_dir: Option<PathBuf>,
    /// Wait for this many clients before generating.
    #[arg(long, default_value_t = 0)]
    pub wait_clients: usize,
    #[arg(long, default_value_t = 30_000)]
    pub wait_timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Frame directory, generate output directory, or wire capture file.
    pub input: PathBuf,
    /// Frames per chunk; inferred from file names or the capture when omitted.
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Weight chunks by |q_t| / |q_1| instead of uniformly.
    #[arg(long)]
    pub wmape: bool,
    /// Also split this manifest CSV 80/20 into `manifest_split.csv`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverheadMode {
    Enabled,
    Disabled,
    /// A deliberately slow span-end hook; the bound does not cover user hooks.
    HeavyHook,
}

#[derive(Debug, Args)]
pub struct OverheadArgs {
    #[arg(long, value_enum, default_value_t = OverheadMode::Enabled)]
    pub mode: OverheadMode,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    /// Work units per run, about 10 µs each.
    #[arg(long, default_value_t = 20_000)]
    pub units: usize,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

type Outcome = Result<u8, Failure>;

fn rt(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn cfg_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("configuration error", m),
                Failure::Runtime(m) => ("error", m),
            };
            eprintln!("inferix: {kind}: {msg}");
            f.code()
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(cfg_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.generate.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    match cli.command {
        Command::Generate(a) => {
            apply_run_args(&mut cfg, &a.run)?;
            cmd_generate(&cfg, a.verify, a.dump_kv)
        }
        Command::Serve(a) => {
            apply_run_args(&mut cfg, &a.run)?;
            if let Some(l) = a.listen.clone() {
                cfg.stream.listen = l;
            }
            if a.web_listen.is_some() {
                cfg.stream.web_listen = a.web_listen.clone();
            }
            if let Some(q) = a.client_queue {
                cfg.stream.client_queue = q;
            }
            if a.console_dir.is_some() {
                cfg.stream.console_dir = a.console_dir.clone();
            }
            cmd_serve(&cfg, a.wait_clients, Duration::from_millis(a.wait_timeout_ms))
        }
        Command::Eval(a) => cmd_eval(&cfg, &a, cli.out.is_some()),
        Command::ProfileOverhead(a) => cmd_profile_overhead(&a),
    }
}

fn apply_run_args(cfg: &mut RunConfig, a: &RunArgs) -> Result<(), Failure> {
    if let Some(b) = a.blocks {
        cfg.generate.num_blocks = b;
    }
    if let Some(p) = &a.prompt {
        cfg.generate.prompt = p.clone();
        cfg.generate.prompts.clear();
    }
    if !a.prompt_at.is_empty() {
        if cfg.generate.prompts.is_empty() {
            cfg.generate.prompts.push(crate::config::PromptEntry {
                chunk: 0,
                text: cfg.generate.prompt.clone(),
            });
        }
        for s in &a.prompt_at {
            let (c, t) = s
                .split_once(':')
                .ok_or_else(|| cfg_err(format!("--prompt-at expects CHUNK:TEXT, got {s:?}")))?;
            let chunk: u32 = c
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("--prompt-at chunk {c:?} is not a number")))?;
            cfg.generate.prompts.retain(|p| p.chunk != chunk);
            cfg.generate.prompts.push(crate::config::PromptEntry {
                chunk,
                text: t.to_string(),
            });
        }
        cfg.generate.prompts.sort_by_key(|p| p.chunk);
    }
    if let Some(w) = a.world_size {
        cfg.parallel.world_size = w;
    }
    if let Some(s) = &a.strategy {
        cfg.parallel.strategy = s.clone();
    }
    if let Some(e) = &a.executor {
        cfg.parallel.executor = e.clone();
    }
    if a.kv_window.is_some() {
        cfg.generate.kv_window = a.kv_window;
    }
    if a.no_profile {
        cfg.profiler.enabled = false;
    }
    Ok(())
}

/// Span-end hook that turns each block span into a `tokens_per_s` metric.
fn register_throughput_hook(p: &Profiler, tokens_per_block: usize) {
    p.register_hook(HookPoint::SpanEnd, move |p, ev| {
        if ev.name == "engine.block" {
            if let Some(ns) = ev.duration_ns().filter(|&ns| ns > 0) {
                let _ = p.record_metric("tokens_per_s", tokens_per_block as f64 * 1e9 / ns as f64);
            }
        }
    });
}

fn write_profile(cfg: &RunConfig, p: &Profiler) -> Result<(), Failure> {
    if !cfg.profiler.enabled {
        return Ok(());
    }
    let path = cfg.output.dir.join(&cfg.profiler.report);
    let report = p.report(ReportFormat::Summary);
    fs::write(&path, report.to_tsv()).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    let json = path.with_extension("json");
    fs::write(&json, report.to_json()).map_err(|e| rt(format!("{}: {e}", json.display())))?;
    Ok(())
}

fn prepare(cfg: &RunConfig) -> Result<(Box<dyn inferix_core::engine::Pipeline>, Backend), Failure> {
    cfg.validate().map_err(cfg_err)?;
    let pipeline = run::build_pipeline(cfg, &PipelineRegistry::default()).map_err(cfg_err)?;
    let backend = Backend::from_config(cfg).map_err(cfg_err)?;
    fs::create_dir_all(&cfg.output.dir).map_err(|e| rt(format!("{}: {e}", cfg.output.dir.display())))?;
    cfg.write_resolved(&cfg.output.dir).map_err(rt)?;
    Ok((pipeline, backend))
}

struct FrameWriter<'a> {
    dir: PathBuf,
    profiler: &'a Profiler,
    span: Option<SpanGuard<'a>>,
    error: Option<String>,
    events: Vec<EngineEvent>,
}

impl EngineObserver for FrameWriter<'_> {
    fn event(&mut self, event: &EngineEvent) {
        self.events.push(event.clone());
    }

    fn block_started(&mut self, _chunk: u32) {
        self.span = Some(self.profiler.scoped("engine.block"));
    }

    fn block_done(&mut self, block: &GeneratedBlock, _stats: &KvStats) {
        self.span = None;
        let _w = self.profiler.scoped("io.write_frames");
        for (i, f) in block.frames.iter().enumerate() {
            let p = self.dir.join(formats::frame_file_name(block.chunk_index, i));
            if let Err(e) = formats::write_frame(&p, f) {
                self.error.get_or_insert(e.to_string());
            }
        }
    }

    fn should_stop(&mut self) -> bool {
        self.error.is_some()
    }
}

fn cmd_generate(cfg: &RunConfig, verify: bool, dump_kv: bool) -> Outcome {
    let (pipeline, backend) = prepare(cfg)?;
    let profiler = Profiler::new(cfg.profiler.enabled);
    register_throughput_hook(&profiler, cfg.model.block_len);
    let frames_dir = cfg.output.dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(rt)?;
    let mut obs = FrameWriter {
        dir: frames_dir,
        profiler: &profiler,
        span: None,
        error: None,
        events: Vec::new(),
    };
    let (blocks, cache) = {
        let _s = profiler.scoped("engine.generate");
        run::generate(cfg, pipeline.as_ref(), &backend, &mut obs).map_err(rt)?
    };
    if let Some(e) = obs.error {
        return Err(rt(e));
    }
    let frames: usize = blocks.iter().map(|b| b.frames.len()).sum();
    println!(
        "generated {} blocks ({frames} frames) into {}",
        blocks.len(),
        cfg.output.dir.display()
    );
    for e in &obs.events {
        if let EngineEvent::PromptApplied { chunk, text } = e {
            println!("prompt from chunk {chunk}: {text}");
        }
    }
    if let Some((t, _)) = backend.traffic() {
        println!(
            "simulated traffic: {} messages, {} bytes over {} workers",
            t.messages, t.bytes, cfg.parallel.world_size
        );
    }
    fs::write(cfg.output.dir.join("traffic.tsv"), backend.traffic_summary()).map_err(rt)?;
    if dump_kv {
        let p = cfg.output.dir.join("kv.bin");
        let mut f = std::io::BufWriter::new(fs::File::create(&p).map_err(rt)?);
        formats::write_kv_dump(&mut f, cache.config().stored_width(), &cache.snapshot_pages()).map_err(rt)?;
        f.flush().map_err(rt)?;
    }
    write_profile(cfg, &profiler)?;
    if verify {
        if cfg.model.pipeline != "toy" {
            return Err(cfg_err("--verify needs the toy pipeline"));
        }
        let model = ToyModel::build(cfg.model_config()).map_err(rt)?;
        let reference = recompute_reference(&model, &cfg.request()).map_err(rt)?;
        let diff = blocks
            .iter()
            .zip(&reference)
            .flat_map(|(a, b)| a.latent.data().iter().zip(b.latent.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0f32, f32::max);
        println!("verify: max_abs_diff={diff:e} tolerance={VERIFY_TOLERANCE:e}");
        if reference.len() != blocks.len() || diff.is_nan() || diff > VERIFY_TOLERANCE {
            eprintln!("inferix: verify failed");
            return Ok(EXIT_RUNTIME);
        }
    }
    Ok(EXIT_OK)
}

static STOP: AtomicBool = AtomicBool::new(false);

pub fn hello_for(cfg: &RunConfig) -> Hello {
    Hello {
        width: cfg.model.frame_width as u16,
        height: cfg.model.frame_height as u16,
        frames_per_chunk: cfg.model.block_len as u16,
        num_chunks: cfg.generate.num_blocks as u32,
        summary: format!(
            "pipeline={} layers={} heads={} head_dim={} block_len={} seed={} world_size={} strategy={}",
            cfg.model.pipeline,
            cfg.model.layers,
            cfg.model.heads,
            cfg.model.head_dim,
            cfg.model.block_len,
            cfg.generate.seed,
            cfg.parallel.world_size,
            cfg.parallel.strategy
        ),
    }
}

fn cmd_serve(cfg: &RunConfig, wait_clients: usize, wait_timeout: Duration) -> Outcome {
    let (pipeline, backend) = prepare(cfg)?;
    let opts = ServeOptions {
        client_queue: cfg.stream.client_queue,
        console_dir: cfg.stream.console_dir.clone(),
    };
    let server = StreamServer::bind(&cfg.stream.listen, cfg.stream.web_listen.as_deref(), hello_for(cfg), opts)
        .map_err(rt)?;
    println!("listening on {}", server.local_addr());
    if let Some(w) = server.web_addr() {
        println!("web bridge on {w} (console at http://{w}/console/)");
    }
    let _ = std::io::stdout().flush();
    // a second handler cannot be installed; the first one still sets STOP
    let _ = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst));
    if wait_clients > 0 && !server.wait_for_clients(wait_clients, wait_timeout) {
        eprintln!("inferix: fewer than {wait_clients} clients connected; generating anyway");
    }
    let profiler = Profiler::new(cfg.profiler.enabled);
    register_throughput_hook(&profiler, cfg.model.block_len);
    let res = {
        let mut obs = StreamObserver::new(server.hub())
            .with_profiler(&profiler)
            .metrics_every(cfg.stream.metrics_every)
            .stop_flag(&STOP);
        let res = run::generate(cfg, pipeline.as_ref(), &backend, &mut obs);
        for u in &obs.rejected {
            println!("rejected prompt update for chunk {}: {:?}", u.effective_chunk, u.text);
        }
        for u in &obs.accepted {
            println!("accepted prompt update from chunk {}: {:?}", u.effective_chunk, u.text);
        }
        res
    };
    let dropped = server.hub().dropped_messages();
    server.shutdown(Duration::from_secs(5));
    let (blocks, _) = res.map_err(rt)?;
    println!("streamed {} blocks; {dropped} messages dropped for slow clients", blocks.len());
    write_profile(cfg, &profiler)?;
    Ok(EXIT_OK)
}

fn load_video(input: &Path, chunk_len: Option<usize>) -> Result<ChunkedVideo, Failure> {
    if !input.exists() {
        return Err(cfg_err(format!("{}: no such file or directory", input.display())));
    }
    let (frames, inferred) = if input.is_dir() {
        let frames_dir = input.join("frames");
        let dir = if frames_dir.is_dir() { frames_dir } else { input.to_path_buf() };
        formats::read_frame_dir(&dir).map_err(cfg_err)?
    } else {
        let cap = formats::read_capture(input).map_err(cfg_err)?;
        let per = cap.hello.as_ref().map(|h| h.frames_per_chunk as usize);
        (cap.frames(), per)
    };
    let chunk_len = chunk_len
        .or(inferred)
        .ok_or_else(|| cfg_err("cannot infer frames per chunk; pass --chunk-len"))?;
    ChunkedVideo::new(frames, chunk_len).map_err(cfg_err)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, explicit_out: bool) -> Outcome {
    let video = load_video(&a.input, a.chunk_len)?;
    let weighting = if a.wmape { Weighting::Wmape } else { Weighting::Uniform };
    let report = evaluate(&video, weighting).map_err(rt)?;
    let out = if explicit_out {
        cfg.output.dir.clone()
    } else if a.input.is_dir() {
        a.input.clone()
    } else {
        a.input.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    fs::create_dir_all(&out).map_err(rt)?;
    let (txt, _) = formats::write_report(&out, &report).map_err(rt)?;
    for (k, v) in report.fields().iter().take(5) {
        println!("{k}\t{v:.6}");
    }
    println!("report written to {}", txt.display());
    if let Some(m) = &a.manifest {
        let entries = formats::read_manifest(m).map_err(cfg_err)?;
        let splits = split_manifest(&entries, a.split_seed).map_err(cfg_err)?;
        let p = out.join("manifest_split.csv");
        formats::write_manifest(&p, &entries, Some(&splits)).map_err(rt)?;
        let train = splits.iter().filter(|s| **s == Split::Train).count();
        println!("manifest split: {train} train / {} eval -> {}", splits.len() - train, p.display());
    }
    Ok(EXIT_OK)
}

fn cmd_profile_overhead(a: &OverheadArgs) -> Outcome {
    let w = Workload::calibrate(Duration::from_micros(10), a.units);
    let p = Profiler::new(a.mode != OverheadMode::Disabled);
    if a.mode == OverheadMode::HeavyHook {
        p.register_hook(HookPoint::SpanEnd, |_, _| {
            std::hint::black_box(crate::profiler::work_unit(20_000));
        });
    }
    let r = measure_overhead(&p, &w, a.rounds).map_err(rt)?;
    println!(
        "mode={:?} units={} iters_per_unit={} plain_ns={} instrumented_ns={} ratio={:.4}",
        a.mode, r.units, r.iters_per_unit, r.plain_ns, r.instrumented_ns, r.ratio
    );
    if r.ratio < OVERHEAD_LIMIT {
        Ok(EXIT_OK)
    } else {
        if a.mode == OverheadMode::HeavyHook {
            println!("ratio >= {OVERHEAD_LIMIT}: the bound covers built-in span instrumentation, not user hooks");
        } else {
            println!("ratio >= {OVERHEAD_LIMIT}");
        }
        Ok(EXIT_RUNTIME)
    }
}
