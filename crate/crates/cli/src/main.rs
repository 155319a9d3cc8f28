use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2xfp::dse::{self, StrategyPoint, SynthSpec, TensorInput};
use m2xfp::engine::{self, EngineError, GemmOptions};
use m2xfp::numerics::{decode, e8m0_exponent, FP8_E4M3};
use m2xfp::packing::{self, PackError, CONTAINER_MAGIC, F32T_MAGIC};
use m2xfp::{oracle, Format, GroupConfig, PackedTensor, QuantizeOptions, ScaleRule, TensorRole};

#[derive(Parser)]
#[command(name = "m2xfp", version, about = "Metadata-augmented microscaling quantization toolkit")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "M2XFP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an F32T tensor into an M2X1 container.
    Quantize {
        #[command(flatten)]
        quant: QuantArgs,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decode an M2X1 container back to an F32T tensor.
    Dequantize { input: PathBuf, output: PathBuf },
    /// Multiply activations (M x K) by weights (K x N raw, or N x K packed).
    Gemm {
        #[command(flatten)]
        geometry: GemmArgs,
        acts: PathBuf,
        weights: PathBuf,
        output: PathBuf,
    },
    /// Sweep strategies over tensors and report EBW and MSE as CSV.
    Dse(DseArgs),
    /// Summarize an M2X1 container.
    Inspect { input: PathBuf },
    /// Run the embedded brute-force oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// Run with 5% of the random cases.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value = "elem-em")]
    format: String,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    subgroup_size: Option<usize>,
    #[arg(long)]
    meta_bits: Option<u8>,
    #[arg(long)]
    top_count: Option<usize>,
    #[arg(long, default_value = "floor")]
    scale_rule: String,
    #[arg(long)]
    adaptive: bool,
    #[arg(long)]
    tensor_scale: Option<f64>,
    #[arg(long)]
    role: Option<String>,
    /// Round inputs to FP16 before quantizing.
    #[arg(long)]
    fp16_inputs: bool,
}

#[derive(Args)]
struct GemmArgs {
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    subgroup_size: Option<usize>,
    #[arg(long, default_value = "floor")]
    scale_rule: String,
    /// Compute with dequantize-then-f64 matmul instead of the datapath model.
    #[arg(long)]
    oracle: bool,
    /// Element metadata on both operands (weights as elem-em-top1).
    #[arg(long)]
    dual_meta: bool,
}

#[derive(Args)]
struct DseArgs {
    /// F32T tensors to sweep.
    inputs: Vec<PathBuf>,
    /// Synthetic tensor, `dist:dims:seed[:scale]` (repeatable).
    #[arg(long)]
    synth: Vec<String>,
    /// Comma-separated strategies, `label[@k[/subgroup]][:rule]`.
    #[arg(long)]
    strategies: Option<String>,
    /// Keep only each tensor's Pareto front.
    #[arg(long)]
    pareto: bool,
    /// Exit 1 if any dominance relation is violated.
    #[arg(long)]
    assert_dominance: bool,
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Io(String),
    Malformed(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Malformed(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Malformed(m) | CliError::Check(m) => m,
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn pack_err(path: &Path, e: PackError) -> CliError {
    let msg = format!("{}: {e}", path.display());
    if e.is_io() {
        CliError::Io(msg)
    } else {
        CliError::Malformed(msg)
    }
}

fn engine_err(e: EngineError) -> CliError {
    match e {
        EngineError::Pack(e) => CliError::Malformed(e.to_string()),
        EngineError::Quant(e) => CliError::Malformed(e.to_string()),
        e => CliError::Usage(e.to_string()),
    }
}

fn parse_rule(s: &str) -> Result<ScaleRule, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("--scale-rule: unknown rule `{s}` (floor|ceil|rtn1|rtn2|rtne)")))
}

fn build_config(a: &QuantArgs) -> Result<GroupConfig, CliError> {
    let mut format: Format = a.format.parse().map_err(|e| CliError::Usage(format!("--format: {e}")))?;
    match (a.top_count, format) {
        (None, _) => {}
        (Some(1), Format::ElemEmTop1 | Format::ElemEmTop2) => format = Format::ElemEmTop1,
        (Some(2), Format::ElemEmTop1 | Format::ElemEmTop2) => format = Format::ElemEmTop2,
        (Some(n), _) => {
            return Err(CliError::Usage(format!("--top-count: {n} is not valid for format {format} (elem-em takes 1 or 2)")))
        }
    }
    let mut cfg = GroupConfig::new(format);
    if let Some(role) = &a.role {
        let role: TensorRole = role.parse().map_err(|e| CliError::Usage(format!("--role: {e}")))?;
        if format != Format::M2Nvfp4 {
            return Err(CliError::Usage("--role: only m2-nvfp4 distinguishes weights and activations".into()));
        }
        cfg = cfg.with_role(role);
    }
    if let Some(k) = a.group_size {
        cfg = cfg.with_k(k);
    }
    if let Some(s) = a.subgroup_size {
        cfg = cfg.with_subgroup(s);
    }
    if let Some(b) = a.meta_bits {
        cfg = cfg.with_meta_bits(b);
    }
    cfg = cfg.with_rule(parse_rule(&a.scale_rule)?).with_adaptive(a.adaptive);
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    if let Some(ts) = a.tensor_scale {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(CliError::Usage(format!("--tensor-scale: must be positive and finite, got {ts}")));
        }
        if !format.uses_tensor_scale() {
            return Err(CliError::Usage(format!("--tensor-scale: format {format} has no tensor scale")));
        }
    }
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

enum Input {
    Raw { dims: Vec<u64>, values: Vec<f32> },
    Packed(PackedTensor),
}

fn read_any(path: &Path) -> Result<Input, CliError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    match bytes.get(..4) {
        Some(m) if m == F32T_MAGIC => {
            let (dims, values) = packing::read_f32_tensor(&bytes[..]).map_err(|e| pack_err(path, e))?;
            Ok(Input::Raw { dims, values })
        }
        Some(m) if m == CONTAINER_MAGIC => {
            Ok(Input::Packed(packing::read_container(&bytes[..]).map_err(|e| pack_err(path, e))?))
        }
        Some(m) => Err(CliError::Malformed(format!("{}: bad magic {m:02x?}", path.display()))),
        None => Err(CliError::Malformed(format!("{}: truncated input", path.display()))),
    }
}

fn read_raw(path: &Path) -> Result<(Vec<u64>, Vec<f32>), CliError> {
    packing::read_f32_tensor(open(path)?).map_err(|e| pack_err(path, e))
}

fn read_packed(path: &Path) -> Result<PackedTensor, CliError> {
    packing::read_container(open(path)?).map_err(|e| pack_err(path, e))
}

fn write_raw(path: &Path, dims: &[u64], values: &[f32]) -> Result<(), CliError> {
    packing::write_f32_tensor(create(path)?, dims, values).map_err(|e| pack_err(path, e))
}

fn cmd_quantize(q: &QuantArgs, input: &Path, output: &Path) -> Result<(), CliError> {
    let cfg = build_config(q)?;
    let (dims, values) = read_raw(input)?;
    let opts = QuantizeOptions { tensor_scale: q.tensor_scale, fp16_inputs: q.fp16_inputs };
    let packed = packing::quantize_tensor(&values, &dims, &cfg, &opts).map_err(|e| pack_err(input, e))?;
    packing::write_container(&packed, create(output)?).map_err(|e| pack_err(output, e))
}

fn cmd_dequantize(input: &Path, output: &Path) -> Result<(), CliError> {
    let packed = read_packed(input)?;
    let values = packing::dequantize_tensor(&packed).map_err(|e| pack_err(input, e))?;
    let values: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    write_raw(output, &packed.dims, &values)
}

fn transpose(values: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

fn gemm_operand(path: &Path, cfg: &GroupConfig, weights: bool) -> Result<PackedTensor, CliError> {
    match read_any(path)? {
        Input::Packed(t) => Ok(t),
        Input::Raw { dims, values } => {
            let (dims, values) = if weights {
                if dims.len() != 2 {
                    return Err(CliError::Usage(format!("{}: weights must be 2-D K x N, got {dims:?}", path.display())));
                }
                let (k, n) = (dims[0] as usize, dims[1] as usize);
                (vec![dims[1], dims[0]], transpose(&values, k, n))
            } else {
                (dims, values)
            };
            packing::quantize_tensor(&values, &dims, cfg, &QuantizeOptions::default()).map_err(|e| pack_err(path, e))
        }
    }
}

fn cmd_gemm(g: &GemmArgs, acts: &Path, weights: &Path, output: &Path) -> Result<(), CliError> {
    let rule = parse_rule(&g.scale_rule)?;
    let shape = |c: GroupConfig| {
        let c = match g.group_size {
            Some(k) => c.with_k(k),
            None => c,
        };
        let c = match g.subgroup_size {
            Some(s) => c.with_subgroup(s),
            None => c,
        };
        c.with_rule(rule)
    };
    let acfg = shape(GroupConfig::elem_em(1));
    let wcfg = shape(if g.dual_meta { GroupConfig::elem_em(1) } else { GroupConfig::sg_em(2, true) });
    for c in [&acfg, &wcfg] {
        c.validate().map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    }
    let a = gemm_operand(acts, &acfg, false)?;
    let w = gemm_operand(weights, &wcfg, true)?;
    // shape and format checks run even in oracle mode
    let out = engine::gemm(&a, &w, GemmOptions { dual_meta: g.dual_meta }).map_err(engine_err)?;
    let values = if g.oracle {
        let da = packing::dequantize_tensor(&a).map_err(|e| pack_err(acts, e))?;
        let dw = packing::dequantize_tensor(&w).map_err(|e| pack_err(weights, e))?;
        let k = *w.dims.last().unwrap_or(&0) as usize;
        oracle::matmul_nt(&da, &dw, out.m, out.n, k).iter().map(|&v| v as f32).collect()
    } else {
        out.values
    };
    write_raw(output, &[out.m as u64, out.n as u64], &values)
}

fn cmd_dse(d: &DseArgs) -> Result<(), CliError> {
    let mut tensors = Vec::new();
    for spec in &d.synth {
        let s: SynthSpec = spec.parse().map_err(|e: dse::DseError| CliError::Usage(format!("--synth: {e}")))?;
        let values = s.generate().map_err(|e| CliError::Usage(format!("--synth: {e}")))?;
        tensors.push(TensorInput { name: s.label(), dims: s.dims.clone(), values });
    }
    for path in &d.inputs {
        let (dims, values) = read_raw(path)?;
        tensors.push(TensorInput { name: path.display().to_string(), dims, values });
    }
    if tensors.is_empty() {
        return Err(CliError::Usage("dse needs at least one tensor file or --synth spec".into()));
    }
    let strategies = match &d.strategies {
        Some(list) => dse::parse_strategies(list).map_err(|e| CliError::Usage(format!("--strategies: {e}")))?,
        None => dse::default_strategies(),
    };
    if strategies.is_empty() {
        return Err(CliError::Usage("--strategies: empty list".into()));
    }
    let points = dse::sweep(&tensors, &strategies).map_err(|e| CliError::Malformed(e.to_string()))?;
    let violations = dse::check_dominance(&points);
    let shown: Vec<StrategyPoint> = if d.pareto { dse::pareto_by_tensor(&points) } else { points };
    match &d.output {
        Some(p) => dse::write_csv(create(p)?, &shown).map_err(|e| io_err(p, e))?,
        None => dse::write_csv(io::stdout().lock(), &shown).map_err(|e| CliError::Io(format!("stdout: {e}")))?,
    }
    if d.assert_dominance && !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| format!("dominance violated: {v}")).collect();
        return Err(CliError::Check(lines.join("\n")));
    }
    Ok(())
}

/// Human-readable container summary.
fn inspect_text(t: &PackedTensor) -> String {
    let cfg = &t.config;
    let dims: Vec<String> = t.dims.iter().map(u64::to_string).collect();
    let mut s = String::new();
    let _ = writeln!(s, "container       M2XF v{}", packing::CONTAINER_VERSION);
    let _ = writeln!(s, "format          {} (id {})", cfg.format, cfg.format.id());
    let _ = writeln!(s, "strategy        {}", dse::strategy_spec(cfg));
    let _ = writeln!(s, "group size      {}", cfg.k);
    let _ = writeln!(s, "subgroup size   {}", cfg.subgroup);
    let _ = writeln!(s, "meta bits       {}", cfg.meta_bits);
    let _ = writeln!(s, "scale rule      {}", cfg.scale_rule);
    let _ = writeln!(s, "adaptive        {}", cfg.adaptive);
    if cfg.format == Format::M2Nvfp4 {
        let _ = writeln!(s, "role            {}", cfg.role);
    }
    let _ = writeln!(s, "dims            {}", dims.join("x"));
    if let Some(ts) = t.tensor_scale {
        let _ = writeln!(s, "tensor scale    {ts}");
    }
    let _ = writeln!(s, "groups          {}", t.group_count());
    let _ = writeln!(s, "ebw             {}", dse::ratio_decimal(&dse::ebw(cfg)));
    let _ = writeln!(s, "element stream  {} bytes", t.elem_stream.len());
    let _ = writeln!(s, "scale stream    {} bytes", t.scale_stream.len());
    let _ = writeln!(s, "meta stream     {} bytes", t.meta_stream.len());
    let mut hist: BTreeMap<u8, usize> = BTreeMap::new();
    for &c in &t.scale_stream {
        *hist.entry(c).or_default() += 1;
    }
    let _ = writeln!(s, "scale histogram");
    let mut rows: Vec<(f64, String, usize)> = hist
        .into_iter()
        .map(|(c, n)| {
            let code = m2xfp::Code(c);
            if cfg.format.uses_tensor_scale() {
                let v = decode(&FP8_E4M3, code);
                (v, format!("  e4m3 {c:#04x} = {v}"), n)
            } else {
                let e = e8m0_exponent(code);
                (e as f64, format!("  e8m0 {c:#04x} = 2^{e}"), n)
            }
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, label, n) in rows {
        let _ = writeln!(s, "{label:<24}{n}");
    }
    s
}

fn cmd_inspect(input: &Path) -> Result<(), CliError> {
    let t = read_packed(input)?;
    print!("{}", inspect_text(&t));
    Ok(())
}

fn cmd_selfcheck(seed: u64, quick: bool) -> Result<(), CliError> {
    let results = oracle::run_selfcheck(seed, if quick { 0.05 } else { 1.0 });
    for r in &results {
        println!("{r}");
    }
    match results.iter().find(|r| r.failure.is_some()) {
        Some(r) => Err(CliError::Check(format!("selfcheck failed: {r}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Quantize { quant, input, output } => cmd_quantize(quant, input, output),
        Command::Dequantize { input, output } => cmd_dequantize(input, output),
        Command::Gemm { geometry, acts, weights, output } => cmd_gemm(geometry, acts, weights, output),
        Command::Dse(d) => cmd_dse(d),
        Command::Inspect { input } => cmd_inspect(input),
        Command::Selfcheck { seed, quick } => cmd_selfcheck(*seed, *quick),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = io::stdout().flush();
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
