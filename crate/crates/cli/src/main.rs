use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hypercam::analysis::{self, SettingPairs, StageStats};
use hypercam::certify::certify;
use hypercam::config::RunConfig;
use hypercam::io::{self, PairRow, PhotonRow, Provenance};
use hypercam::pipeline::{cluster_and_centroid, CentroidStats, CentroidedPhoton, CoincidencePair};
use hypercam::spatial::{CorrelationMatrix, SpatialBasis, SuperpixelGrid};
use hypercam::synth::{simulate_acquisition, MeasurementSetting, PhotonEvent, SimStats};
use hypercam::tomo::EntanglementMaps;

#[derive(Parser)]
#[command(name = "hypercam", version, about = "Simulate and analyze hyperentangled photon pairs on a time-stamping camera")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Directory holding the previous stage's files; defaults to
    /// `paths.events_dir` from the config, then to `--out`.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one event file and one ground-truth file per setting.
    Simulate,
    /// Cluster and centroid every event file.
    Centroid,
    /// Find coincidences in every photon file.
    Coincide,
    /// Superpixel matrices, width fits and EPR products.
    Correlate,
    /// Entanglement-dimensionality certification.
    Certify {
        /// Momentum-basis matrix CSV [default: <input>/matrix_momentum.csv].
        #[arg(long)]
        momentum: Option<PathBuf>,
        /// Position-basis matrix CSV [default: <input>/matrix_position.csv].
        #[arg(long)]
        position: Option<PathBuf>,
        /// Include the table of B_k bounds.
        #[arg(long)]
        b_table: bool,
    },
    /// Spatially resolved polarization tomography.
    Tomo {
        /// Certified spatial dimension [default: from <input>/certification.json].
        #[arg(long)]
        spatial_dim: Option<usize>,
    },
    /// Full chain from event files to a single summary.
    Report,
}

struct Ctx {
    cfg: RunConfig,
    prov: Provenance,
    out: PathBuf,
    input: PathBuf,
}

impl Ctx {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn in_file(&self, name: &str) -> Result<PathBuf> {
        let p = self.input.join(name);
        if !p.is_file() {
            bail!(hypercam::Error::Config(format!("missing input {}", p.display())));
        }
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, data: &T) -> Result<()> {
        let path = self.out_file(name);
        io::write_json(&path, &self.prov, data).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Serialize)]
struct Named<T> {
    setting: String,
    #[serde(flatten)]
    stats: T,
}

#[derive(Serialize, Deserialize)]
struct Grids {
    momentum: SuperpixelGrid,
    position: SuperpixelGrid,
}

#[derive(Serialize)]
struct MapRow {
    mode: usize,
    signal_x: f64,
    signal_y: f64,
    idler_x: f64,
    idler_y: f64,
    total: u64,
    intensity: f64,
    valid: bool,
    concurrence: Option<f64>,
    phase: Option<f64>,
    eof: Option<f64>,
}

fn load_context(g: &Global) -> Result<Ctx> {
    let path = g.config.as_deref().context("--config is required")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let input = g
        .input
        .clone()
        .or_else(|| cfg.paths.events_dir.clone())
        .unwrap_or_else(|| g.out.clone());
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    Ok(Ctx {
        prov: Provenance::new(cfg.hash()),
        cfg,
        out: g.out.clone(),
        input,
    })
}

fn simulate(ctx: &Ctx) -> Result<()> {
    let det = ctx.cfg.detector();
    let mut summary = Vec::new();
    for s in ctx.cfg.all_settings()? {
        let stem = analysis::setting_stem(&s);
        let acq = simulate_acquisition(&ctx.cfg.source, &det, &s, true)?;
        io::write_events_file(&ctx.out_file(&format!("events_{stem}.bin")), &acq.events, &ctx.prov.config_hash)?;
        io::write_truth_gz(
            &ctx.out_file(&format!("truth_{stem}.csv.gz")),
            acq.truth.as_deref().unwrap_or_default(),
            &ctx.prov,
        )?;
        summary.push(Named::<SimStats> {
            setting: stem,
            stats: acq.stats,
        });
    }
    ctx.write_json("config.json", &ctx.cfg)?;
    ctx.write_json("simulate.json", &summary)
}

fn read_events(ctx: &Ctx, stem: &str) -> Result<Vec<PhotonEvent>> {
    let path = ctx.in_file(&format!("events_{stem}.bin"))?;
    let (header, events) = io::read_events_file(&path).with_context(|| format!("reading {}", path.display()))?;
    if header.config_hash != ctx.prov.config_hash {
        eprintln!("note: {} was simulated with config {}", path.display(), header.config_hash);
    }
    Ok(events)
}

fn centroid(ctx: &Ctx) -> Result<()> {
    let mut summary = Vec::new();
    for s in ctx.cfg.all_settings()? {
        let stem = analysis::setting_stem(&s);
        let events = read_events(ctx, &stem)?;
        let (photons, stats) = cluster_and_centroid(&events, &ctx.cfg.pipeline.cluster, &ctx.cfg.layout())?;
        io::write_csv(
            &ctx.out_file(&format!("photons_{stem}.csv")),
            &ctx.prov,
            photons.iter().map(PhotonRow::from),
        )?;
        summary.push(Named::<CentroidStats> { setting: stem, stats });
    }
    ctx.write_json("centroid.json", &summary)
}

fn coincide(ctx: &Ctx) -> Result<()> {
    let mut summary = Vec::new();
    for s in ctx.cfg.all_settings()? {
        let stem = analysis::setting_stem(&s);
        let path = ctx.in_file(&format!("photons_{stem}.csv"))?;
        let rows: Vec<PhotonRow> = io::read_csv_file(&path).with_context(|| format!("reading {}", path.display()))?;
        let photons: Vec<CentroidedPhoton> = rows.into_iter().map(Into::into).collect();
        let (pairs, stats) = analysis::coincide_photons(&photons, &ctx.cfg)?;
        io::write_csv(&ctx.out_file(&format!("pairs_{stem}.csv")), &ctx.prov, pairs.iter().map(PairRow::from))?;
        summary.push(Named::<StageStats> { setting: stem, stats });
    }
    ctx.write_json("coincide.json", &summary)
}

fn read_pairs(ctx: &Ctx) -> Result<Vec<SettingPairs>> {
    ctx.cfg
        .all_settings()?
        .into_iter()
        .map(|setting| {
            let path = ctx.in_file(&format!("pairs_{}.csv", analysis::setting_stem(&setting)))?;
            let rows: Vec<PairRow> = io::read_csv_file(&path).with_context(|| format!("reading {}", path.display()))?;
            let pairs: Vec<CoincidencePair> = rows.into_iter().map(Into::into).collect();
            let stats = StageStats {
                coincidences: pairs.len(),
                ..Default::default()
            };
            Ok(SettingPairs { setting, pairs, stats })
        })
        .collect()
}

fn write_matrix(ctx: &Ctx, name: &str, m: &CorrelationMatrix) -> Result<()> {
    io::write_matrix_csv(&ctx.out_file(&format!("{name}.csv")), &ctx.prov, m)?;
    let file = fs::File::create(ctx.out_file(&format!("{name}.bin")))?;
    io::write_matrix_bin(std::io::BufWriter::new(file), m)?;
    Ok(())
}

fn correlate(ctx: &Ctx) -> Result<()> {
    let data = read_pairs(ctx)?;
    let corr = analysis::correlate(&ctx.cfg, &data)?;
    write_matrix(ctx, "matrix_momentum", &corr.momentum)?;
    write_matrix(ctx, "matrix_position", &corr.position)?;
    for (s, m) in &corr.far_field {
        write_matrix(ctx, &format!("matrix_{}", analysis::setting_stem(s)), m)?;
    }
    ctx.write_json(
        "grids.json",
        &Grids {
            momentum: corr.momentum_grid.clone(),
            position: corr.position_grid.clone(),
        },
    )?;
    ctx.write_json("widths.json", &corr.widths)?;
    ctx.write_json("epr.json", &corr.epr)
}

fn read_matrix(path: &Path, basis: SpatialBasis) -> Result<CorrelationMatrix> {
    if !path.is_file() {
        bail!(hypercam::Error::Config(format!("missing input {}", path.display())));
    }
    io::read_matrix_csv_file(path, basis).with_context(|| format!("reading {}", path.display()))
}

fn run_certify(ctx: &Ctx, momentum: Option<PathBuf>, position: Option<PathBuf>, b_table: bool) -> Result<()> {
    let mp = momentum.unwrap_or_else(|| ctx.input.join("matrix_momentum.csv"));
    let pp = position.unwrap_or_else(|| ctx.input.join("matrix_position.csv"));
    let result = certify(
        &read_matrix(&mp, SpatialBasis::Momentum)?,
        &read_matrix(&pp, SpatialBasis::Position)?,
        b_table,
    )?;
    ctx.write_json("certification.json", &result)
}

fn map_rows(maps: &EntanglementMaps) -> impl Iterator<Item = MapRow> + '_ {
    maps.cells.iter().map(|c| MapRow {
        mode: c.mode,
        signal_x: c.signal_px[0],
        signal_y: c.signal_px[1],
        idler_x: c.idler_px[0],
        idler_y: c.idler_px[1],
        total: c.total,
        intensity: c.intensity,
        valid: c.valid,
        concurrence: c.state.map(|s| s.concurrence),
        phase: c.state.and_then(|s| s.phase),
        eof: c.state.map(|s| s.eof),
    })
}

fn tomo(ctx: &Ctx, spatial_dim: Option<usize>) -> Result<()> {
    let grids: io::Stamped<Grids> = io::read_json(&ctx.in_file("grids.json")?)?;
    let spatial_dim = match spatial_dim {
        Some(d) => d,
        None => {
            let c: io::Stamped<serde_json::Value> = io::read_json(&ctx.in_file("certification.json")?)?;
            c.data["certified_dim"]
                .as_u64()
                .context("certification.json has no certified_dim")? as usize
        }
    };
    let far_field: Vec<(MeasurementSetting, CorrelationMatrix)> = ctx
        .cfg
        .far_field_settings()?
        .into_iter()
        .map(|s| {
            let path = ctx.input.join(format!("matrix_{}.csv", analysis::setting_stem(&s)));
            Ok((s, read_matrix(&path, SpatialBasis::Momentum)?))
        })
        .collect::<Result<_>>()?;
    let out = analysis::tomography(&ctx.cfg, &grids.data.momentum, &far_field, spatial_dim)?;
    io::write_csv(&ctx.out_file("maps.csv"), &ctx.prov, map_rows(&out.maps))?;
    ctx.write_json("maps.json", &out.maps)?;
    ctx.write_json("aggregate.json", &out.aggregate)?;
    ctx.write_json("hyperdim.json", &out.hyperdim)
}

fn report(ctx: &Ctx) -> Result<()> {
    let data = ctx
        .cfg
        .all_settings()?
        .into_iter()
        .map(|setting| {
            let events = read_events(ctx, &analysis::setting_stem(&setting))?;
            let (pairs, stats) = analysis::process_events(&events, &ctx.cfg)?;
            Ok(SettingPairs { setting, pairs, stats })
        })
        .collect::<Result<Vec<_>>>()?;
    let (report, _, _) = analysis::report(&ctx.cfg, &data)?;
    ctx.write_json("report.json", &report)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let threads = if g.deterministic { 1 } else { g.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    let ctx = load_context(g)?;
    match cli.command {
        Command::Simulate => simulate(&ctx),
        Command::Centroid => centroid(&ctx),
        Command::Coincide => coincide(&ctx),
        Command::Correlate => correlate(&ctx),
        Command::Certify {
            momentum,
            position,
            b_table,
        } => run_certify(&ctx, momentum, position, b_table),
        Command::Tomo { spatial_dim } => tomo(&ctx, spatial_dim),
        Command::Report => report(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<hypercam::Error>())
                .map_or("error", hypercam::Error::kind);
            let msg = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
