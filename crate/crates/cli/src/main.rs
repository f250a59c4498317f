use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use rfopt_core::cost::{self, CostOptions};
use rfopt_core::decomposer::{self, Block, BlockTemplate, DecomposeOptions};
use rfopt_core::format::{parse_network, serialize_network};
use rfopt_core::organizer::{self, OrganizerConfig};
use rfopt_core::report::{self, Format, ReportRow, Table};
use rfopt_core::rf::{self, DEFAULT_ALPHA, IMAGE_DIMS};
use rfopt_core::{oracle, presets, Error, NetworkSpec, Overlap, TensorShape};

#[derive(Parser)]
#[command(name = "rfopt", version, about = "Receptive-field analysis and structure optimization for CNN architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer receptive-field profile and gains.
    Analyze(AnalyzeArgs),
    /// Rebalance blocks across stages by gain.
    Organize(OrganizeArgs),
    /// Replace standard convolutions with a block template.
    Decompose(DecomposeArgs),
    /// Check a block template against the replacement rule.
    VerifyBlock(VerifyBlockArgs),
    /// Exact coverage of one stage next to the scalar recurrence.
    Oracle(OracleArgs),
    /// Bundled architectures.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Summary rows for one or two networks.
    Report(ReportArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Architecture file or `presets:<name>`.
    input: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "text")]
    format: Format,
    /// Print the per-layer cost breakdown instead of the profile.
    #[arg(long)]
    costs: bool,
    #[arg(long)]
    include_bias: bool,
}

#[derive(Args)]
struct OrganizeArgs {
    input: String,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Defaults to twice the layer count.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Write the organized architecture here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the move log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BlockArgs {
    /// standard, dw_pw_xception, dw_pw, gc_shuffle_gpw, shufflenet or dw_rpw.
    #[arg(long)]
    block: BlockTemplate,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Channel overlap ratio for dw_rpw, e.g. `1/2`.
    #[arg(long, default_value = "1/2")]
    overlap: Overlap,
}

impl BlockArgs {
    fn block(&self) -> Block {
        Block::new(self.block).with_groups(self.groups).with_overlap(self.overlap)
    }
}

#[derive(Args)]
struct DecomposeArgs {
    input: String,
    #[command(flatten)]
    block: BlockArgs,
    /// Run the replacement-rule check on every rewritten stage.
    #[arg(long)]
    verify: bool,
    /// Also rewrite the first convolution.
    #[arg(long)]
    include_first: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyBlockArgs {
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Number of stacked blocks.
    #[arg(long, default_value_t = 1)]
    stack: usize,
}

#[derive(Args)]
struct OracleArgs {
    input: String,
    #[arg(long)]
    stage: usize,
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Dump { name: String },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    before: String,
    #[arg(long)]
    after: Option<String>,
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    include_bias: bool,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// Bad input to a well-formed command: validation or verification.
    Check(anyhow::Error),
    Usage(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::UnknownPreset(_) | Error::Index { .. } => Failure::Usage(e.into()),
            _ => Failure::Check(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(other) => Failure::Check(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `rfopt --help` for usage");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Analyze(a) => analyze(a),
        Command::Organize(a) => organize(a),
        Command::Decompose(a) => decompose(a),
        Command::VerifyBlock(a) => verify_block(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Presets { action } => presets_cmd(action),
        Command::Report(a) => report_cmd(a),
    }
}

fn load(input: &str) -> Result<NetworkSpec, Failure> {
    if let Some(name) = presets::reference_name(input) {
        return Ok(presets::load(name)?);
    }
    let text = fs::read_to_string(input)
        .with_context(|| format!("cannot read `{input}`"))
        .map_err(Failure::Usage)?;
    parse_network(&text).map_err(|e| Failure::Check(anyhow::Error::new(e).context(input.to_string())))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("cannot write `{}`", path.display()))
        .map_err(Failure::Check)
}

fn check_alpha(alpha: f64) -> CmdResult {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("--alpha must be a positive number, got {alpha}")).into())
    }
}

fn print(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn analyze(a: AnalyzeArgs) -> CmdResult {
    check_alpha(a.alpha)?;
    let net = load(&a.input)?;
    let opts = CostOptions {
        include_bias: a.include_bias,
    };
    let costs = cost::network_cost(&net, opts)?;
    let profile = rf::network_profile(&net, a.alpha, IMAGE_DIMS)?;
    let table = if a.costs {
        report::cost_table(&costs)
    } else {
        report::profile_table(&profile)
    };
    print(&table.render(a.format));
    if a.format == Format::Text {
        println!();
        println!("network:     {}", net.name);
        println!("total gain:  {:.4}", profile.total_gain());
        println!("params:      {} ({:.2}M)", costs.params, costs.params_m());
        println!("{}: {:.1} (rounded {})", cost::UNIT_NAME, costs.mflops(), costs.mflops_rounded());
    }
    Ok(())
}

fn organize(a: OrganizeArgs) -> CmdResult {
    check_alpha(a.alpha)?;
    let net = load(&a.input)?;
    let cfg = OrganizerConfig {
        theta: a.theta,
        alpha: a.alpha,
        max_iters: a.max_iters,
        ..OrganizerConfig::default()
    };
    let outcome = organizer::optimize(&net, &cfg)?;
    let lines = outcome.log.lines();
    for l in &lines {
        println!("{l}");
    }
    let counts = |n: &NetworkSpec| {
        let c: Vec<String> = n.stages.iter().map(|s| s.layers.len().to_string()).collect();
        c.join(",")
    };
    println!("layers per stage: [{}] -> [{}]", counts(&net), counts(&outcome.net));
    println!("moves={} removes={}", outcome.log.moves(), outcome.log.removes());
    if let Some(p) = &a.log {
        let mut text = lines.join("\n");
        text.push('\n');
        write_file(p, &text)?;
    }
    if let Some(p) = &a.out {
        write_file(p, &serialize_network(&outcome.net))?;
    }
    Ok(())
}

fn decompose(a: DecomposeArgs) -> CmdResult {
    let net = load(&a.input)?;
    let opts = DecomposeOptions {
        verify: a.verify,
        include_first: a.include_first,
    };
    let d = decomposer::decompose(&net, &a.block.block(), opts)?;
    for (stage, r) in &d.reports {
        eprintln!("stage {stage}: {}", r.summary());
    }
    eprintln!("replaced {} convolution(s)", d.replaced);
    let text = serialize_network(&d.net);
    match &a.out {
        Some(p) => write_file(p, &text),
        None => {
            print(&text);
            Ok(())
        }
    }
}

fn verify_block(a: VerifyBlockArgs) -> CmdResult {
    if a.stack == 0 {
        return Err(Error::InvalidArgument("--stack must be >= 1".into()).into());
    }
    let block = a.block.block();
    let shape = TensorShape::new(a.width, a.channels);
    let r = decomposer::verify_replacement(&block, shape, a.stack)?;
    println!("block:        {}", r.block);
    println!("stack:        {}", r.stack_depth);
    println!("shape:        {}", r.shape);
    if let Some(s) = &r.scaling {
        println!("scaling:      {s}");
    }
    let q = &r.quality_report;
    println!("quality:      {}", r.quality);
    println!("  reference volume: {}", q.reference_volume);
    println!("  center volumes:   {:?}", q.center_volumes);
    if !q.failing_channels.is_empty() {
        println!("  failing channels: {:?}", q.failing_channels);
    }
    println!("  corners hold:     {}", q.corner_holds);
    println!("compact:      {}", r.compact);
    for del in &r.compact_report.deletions {
        println!(
            "  without layer {} ({}): quality={}{}",
            del.index,
            del.label,
            del.quality,
            del.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    println!("result:       {}", if r.passes() { "PASS" } else { "FAIL" });
    if r.passes() {
        Ok(())
    } else {
        Err(Failure::Check(anyhow::anyhow!("replacement rule not satisfied: {}", r.summary())))
    }
}

fn oracle_cmd(a: OracleArgs) -> CmdResult {
    let net = load(&a.input)?;
    net.ensure_valid()?;
    let input = net.stage_input_shape(a.stage)?;
    let layers = &net.stages[a.stage].layers;
    let (layers, shape, note) = oracle::scale_stage(layers, input).ok_or_else(|| {
        Failure::Check(anyhow::anyhow!(
            "stage {} ({input}) cannot be reduced into oracle bounds ({w}x{w}x{c})",
            a.stage,
            w = oracle::MAX_WIDTH,
            c = oracle::MAX_CHANNELS
        ))
    })?;
    if let Some(n) = &note {
        println!("note: {n}");
    }
    let traces = oracle::trace_stage(&layers, shape)?;
    let profile = rf::stage_profile(&layers, shape, IMAGE_DIMS)?;
    let scalar = scalar_volumes(&layers, shape)?;
    let mut t = Table::new(&["layer", "kind", "exact", "exact_max", "scalar", "profile", "flag"]);
    let mut disagreements = 0;
    for ((tr, p), s) in traces.iter().zip(&profile).zip(&scalar) {
        let flag = if tr.volume != *s {
            disagreements += 1;
            "DIFF"
        } else {
            ""
        };
        t.push(vec![
            tr.layer.to_string(),
            layers[tr.layer].label(),
            tr.volume.to_string(),
            tr.max_volume.to_string(),
            s.to_string(),
            p.volume.to_string(),
            flag.to_string(),
        ]);
    }
    print(&t.render(Format::Text));
    println!("disagreements: {disagreements}");
    Ok(())
}

/// Volumes from the width/channel recurrences alone, with no channel sets.
fn scalar_volumes(layers: &[rfopt_core::KernelSpec], input: TensorShape) -> Result<Vec<u64>, Failure> {
    let (mut w, mut c, mut ch) = (1usize, 1usize, input.channels);
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        w = rf::rf_width_step(w, l.kernel_width, input.width);
        c = rf::rf_channel_step(c, l, ch, input.channels)?;
        ch = l.out_channels;
        out.push((w as u64).pow(IMAGE_DIMS) * c as u64);
    }
    Ok(out)
}

fn presets_cmd(action: PresetAction) -> CmdResult {
    match action {
        PresetAction::List => {
            for n in presets::names() {
                println!("{n}");
            }
        }
        PresetAction::Dump { name } => {
            let name = presets::reference_name(&name).unwrap_or(&name);
            print(presets::text(name)?);
        }
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CmdResult {
    check_alpha(a.alpha)?;
    let opts = CostOptions {
        include_bias: a.include_bias,
    };
    let mut rows = Vec::new();
    for input in std::iter::once(&a.before).chain(a.after.as_ref()) {
        let net = load(input)?;
        let mut row = ReportRow::from_network(&net, a.alpha, opts)?;
        if let Some(note) = presets::reference_name(input).and_then(report::reference_note) {
            row.notes = note;
        }
        rows.push(row);
    }
    print(&report::emit_table(&rows, a.format));
    Ok(())
}
