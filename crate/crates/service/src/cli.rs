//! The `biodw` command line.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use biodw_core::analytics::{Page, DEFAULT_PAGE_SIZE};
use biodw_core::bundle::load_bundle_file;
use biodw_core::fixture::{Fixture, DEFAULT_SEED};
use biodw_core::metadata::{MetadataEntry, MetadataRegistry};
use biodw_core::schema::SchemaFile;
use biodw_core::{OpenMode, Warehouse};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::api::{self, ApiConfig};
use crate::ops::{self, RollupParams};
use crate::render;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Aligned text for people.
    Table,
    /// JSON of the same values the API returns.
    Machine,
}

#[derive(Debug, Parser)]
#[command(name = "biodw", version, about = "Biomedical data warehouse: load, query and serve")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "BIODW_STORE", default_value = "biodw-store")]
    pub store: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty store with the built-in schema.
    Init {
        /// Schema file extending the built-in schema.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Inspect the schema.
    #[command(subcommand)]
    Schema(SchemaCmd),
    /// Label, unit, interval and analysis metadata.
    #[command(subcommand)]
    Metadata(MetadataCmd),
    /// ETL mapping profiles.
    #[command(subcommand)]
    Profile(ProfileCmd),
    /// Load delimited source files.
    #[command(subcommand)]
    Etl(EtlCmd),
    /// Load complex-fact bundles.
    #[command(subcommand)]
    Bundle(BundleCmd),
    /// Retrieve stored documents.
    #[command(subcommand)]
    Document(DocumentCmd),
    /// Documents linked to reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Find patients and read their records.
    #[command(subcommand)]
    Patient(PatientCmd),
    /// Saved patient groups.
    #[command(subcommand)]
    Group(GroupCmd),
    /// Descriptive statistics of an analysis across groups.
    Compare {
        /// Comma-separated group names.
        #[arg(long, value_delimiter = ',', required = true)]
        groups: Vec<String>,
        #[arg(long)]
        analysis: String,
    },
    /// Aggregate a fact table at a level of one of its dimensions.
    Rollup {
        #[arg(long)]
        mart: String,
        #[arg(long)]
        fact: String,
        #[arg(long)]
        dim: String,
        #[arg(long)]
        level: String,
        #[arg(long, default_value = "count")]
        agg: String,
    },
    /// Delimited exports.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Full integrity scan; exits 1 when violations are found.
    Audit,
    /// Synthetic sample corpus.
    #[command(subcommand)]
    Fixture(FixtureCmd),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum SchemaCmd {
    /// Dimensions, datamarts and conformance.
    Show,
}

#[derive(Debug, Subcommand)]
pub enum MetadataCmd {
    /// Register every entry of a JSON-lines file.
    Load { file: PathBuf },
    /// Register one entry given as JSON.
    Add { json: String },
    List {
        #[command(flatten)]
        page: PageArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProfileCmd {
    /// Register an ETL profile from its TOML file.
    Add { file: PathBuf },
    List,
}

#[derive(Debug, Subcommand)]
pub enum EtlCmd {
    /// Load one source file; exits 1 when the file is rejected as a whole.
    Run {
        #[arg(long)]
        profile: String,
        file: PathBuf,
        #[arg(long)]
        batch: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BundleCmd {
    /// Load a JSON bundle file of reports, results and documents.
    Load {
        file: PathBuf,
        #[arg(long)]
        batch: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DocumentCmd {
    /// Write a document's bytes to `--out`, or to stdout.
    Get {
        id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Documents linked to a report fact.
    Documents {
        id: String,
        #[command(flatten)]
        page: PageArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum PatientCmd {
    /// Patients whose key or name contains the query.
    Search {
        #[arg(default_value = "")]
        query: String,
        #[command(flatten)]
        page: PageArgs,
    },
    /// A patient's facts in one datamart, flagged.
    Record {
        patient: String,
        #[arg(long)]
        mart: String,
    },
    /// Time series of one analysis.
    Series {
        patient: String,
        #[arg(long)]
        analysis: String,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GroupCmd {
    Create {
        name: String,
        /// `;`-separated predicates, e.g. `sex = F; latest(HGB) < 12`.
        #[arg(long)]
        criteria: String,
    },
    /// Replace the criteria, or re-materialize with the current ones.
    Modify {
        name: String,
        #[arg(long)]
        criteria: Option<String>,
    },
    Delete { name: String },
    List {
        #[command(flatten)]
        page: PageArgs,
    },
    Show { name: String },
    /// Patients the criteria would select, without saving.
    Preview {
        #[arg(long)]
        criteria: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExportCmd {
    /// Patient × analysis table of latest values (CSV unless `--format machine`).
    Av {
        #[arg(long)]
        mart: String,
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        as_of: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every fact of a datamart with natural keys, as CSV.
    Mart {
        #[arg(long)]
        mart: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FixtureCmd {
    /// Write the synthetic corpus (schema, metadata, profiles, sources, bundles).
    Generate {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct PageArgs {
    #[arg(long)]
    pub page: Option<usize>,
    #[arg(long)]
    pub page_size: Option<usize>,
}

impl PageArgs {
    fn page(&self) -> Page {
        Page::new(self.page, self.page_size)
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Static bearer token; required off loopback.
    #[arg(long, env = "BIODW_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long)]
    pub read_only: bool,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE)]
    pub page_size: usize,
    /// Directory file references of `POST /etl/run` resolve against.
    #[arg(long)]
    pub ingest_dir: Option<PathBuf>,
}

struct Out<'a> {
    format: Format,
    w: &'a mut dyn Write,
}

impl Out<'_> {
    fn emit<T: Serialize>(&mut self, value: &T, table: impl FnOnce(&T) -> String) -> anyhow::Result<()> {
        match self.format {
            Format::Machine => {
                serde_json::to_writer_pretty(&mut *self.w, value)?;
                writeln!(self.w)?;
            }
            Format::Table => self.w.write_all(table(value).as_bytes())?,
        }
        Ok(())
    }

    fn text(&mut self, text: &str) -> anyhow::Result<()> {
        self.w.write_all(text.as_bytes())?;
        Ok(())
    }
}

fn open(store: &Path) -> anyhow::Result<Warehouse> {
    Warehouse::open(store, OpenMode::Open).with_context(|| format!("cannot open store {}", store.display()))
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_or_print(out: &mut Out, path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display())),
        None => Ok(out.w.write_all(bytes)?),
    }
}

/// Runs one command; returns the process exit status.
fn execute(cli: Cli, out: &mut Out) -> anyhow::Result<i32> {
    let store = cli.store.as_path();
    match cli.command {
        Command::Init { schema } => {
            let schema = schema.map(|p| read(&p)).transpose()?.map(|t| SchemaFile::parse(&t)).transpose()?;
            let wh = Warehouse::create(store, schema.as_ref())?;
            out.emit(&ops::schema(&wh)?, render::schema)?;
        }
        Command::Schema(SchemaCmd::Show) => out.emit(&ops::schema(&open(store)?)?, render::schema)?,
        Command::Metadata(cmd) => match cmd {
            MetadataCmd::Load { file } => {
                let entries = MetadataRegistry::parse_lines(&read(&file)?)?;
                let done = ops::register_metadata(&mut open(store)?, entries)?;
                out.emit(&done, |d| render::registrations(d))?;
            }
            MetadataCmd::Add { json } => {
                let entry: MetadataEntry = serde_json::from_str(&json).context("metadata entry is not valid JSON")?;
                let done = ops::register_metadata(&mut open(store)?, vec![entry])?;
                out.emit(&done, |d| render::registrations(d))?;
            }
            MetadataCmd::List { page } => out.emit(&ops::metadata(&open(store)?, page.page()), render::metadata)?,
        },
        Command::Profile(cmd) => match cmd {
            ProfileCmd::Add { file } => {
                let p = ops::register_profile(&mut open(store)?, &read(&file)?)?;
                out.emit(&p, |p| render::profiles(std::slice::from_ref(p)))?;
            }
            ProfileCmd::List => out.emit(&ops::profiles(&open(store)?), |p| render::profiles(p))?,
        },
        Command::Etl(EtlCmd::Run { profile, file, batch }) => {
            let report = ops::etl_file(&mut open(store)?, &profile, &file, batch.as_deref())?;
            out.emit(&report, render::load_report)?;
            if report.failure.is_some() {
                return Ok(1);
            }
        }
        Command::Bundle(BundleCmd::Load { file, batch }) => {
            let batch = batch.unwrap_or_else(|| ops::default_batch(&file.to_string_lossy()));
            let mut wh = open(store)?;
            let outcomes = load_bundle_file(&mut wh, &file, &batch).map_err(ops::OpError::from)?;
            out.emit(&outcomes, |o| render::bundles(o))?;
        }
        Command::Document(DocumentCmd::Get { id, out: path }) => {
            let (_, bytes) = ops::document(&open(store)?, &id)?;
            write_or_print(out, path.as_deref(), &bytes)?;
        }
        Command::Report(ReportCmd::Documents { id, page }) => {
            out.emit(&ops::report_documents(&open(store)?, &id, page.page())?, render::documents)?
        }
        Command::Patient(cmd) => {
            let wh = open(store)?;
            match cmd {
                PatientCmd::Search { query, page } => out.emit(&ops::search(&wh, &query, page.page())?, render::patients)?,
                PatientCmd::Record { patient, mart } => out.emit(&ops::record(&wh, &patient, &mart)?, render::record)?,
                PatientCmd::Series { patient, analysis, from, to } => {
                    let points = ops::series(&wh, &patient, &analysis, from.as_deref(), to.as_deref())?;
                    out.emit(&points, |p| render::series(p))?
                }
            }
        }
        Command::Group(cmd) => match cmd {
            GroupCmd::Create { name, criteria } => out.emit(&ops::create(&mut open(store)?, &name, &criteria)?, render::group)?,
            GroupCmd::Modify { name, criteria } => {
                out.emit(&ops::modify(&mut open(store)?, &name, criteria.as_deref())?, render::group)?
            }
            GroupCmd::Delete { name } => out.emit(&ops::delete(&mut open(store)?, &name)?, render::group)?,
            GroupCmd::List { page } => out.emit(&ops::groups(&open(store)?, page.page()), render::groups)?,
            GroupCmd::Show { name } => out.emit(&ops::group(&open(store)?, &name)?, render::group)?,
            GroupCmd::Preview { criteria } => out.emit(&ops::preview(&open(store)?, &criteria)?, render::preview)?,
        },
        Command::Compare { groups, analysis } => {
            out.emit(&ops::compare(&open(store)?, &groups, &analysis)?, render::comparison)?
        }
        Command::Rollup { mart, fact, dim, level, agg } => {
            let rows = ops::rollup(&open(store)?, &RollupParams { mart, fact, dim, level, agg })?;
            out.emit(&rows, |r| render::rollup(r))?
        }
        Command::Export(cmd) => match cmd {
            ExportCmd::Av { mart, group, as_of, out: path } => {
                let view = ops::export_av(&open(store)?, &mart, group.as_deref(), as_of.as_deref())?;
                match (out.format, path) {
                    (Format::Table, Some(p)) => write_or_print(out, Some(&p), view.to_csv().as_bytes())?,
                    (Format::Machine, Some(p)) => write_or_print(out, Some(&p), &serde_json::to_vec_pretty(&view)?)?,
                    (_, None) => out.emit(&view, render::attribute_value)?,
                }
            }
            ExportCmd::Mart { mart, out: path } => {
                let csv = ops::export_mart(&open(store)?, &mart)?;
                write_or_print(out, path.as_deref(), csv.as_bytes())?;
            }
        },
        Command::Audit => {
            let report = ops::audit(&open(store)?);
            out.emit(&report, render::audit)?;
            if report.violation_count() > 0 {
                return Ok(1);
            }
        }
        Command::Fixture(FixtureCmd::Generate { dir, seed }) => {
            let fixture = Fixture::generate(seed);
            fixture.write_to(&dir).with_context(|| format!("cannot write fixture to {}", dir.display()))?;
            out.text(&format!(
                "fixture (seed {seed}) written to {}: {} sources, {} bundles, {} documents\n",
                dir.display(),
                fixture.sources.len(),
                fixture.bundles.len(),
                fixture.documents.len()
            ))?;
        }
        Command::Serve(args) => {
            if args.page_size == 0 {
                bail!("page size must be positive");
            }
            let config = ApiConfig {
                bind: args.bind,
                store: cli.store.clone(),
                token: args.token,
                page_size: args.page_size,
                read_only: args.read_only,
                ingest_dir: args.ingest_dir,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(api::serve(config))?;
        }
    }
    Ok(0)
}

/// Parses `args` and runs the command, writing results to `stdout` and
/// diagnostics to `stderr`. Returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let mut out = Out { format: cli.format, w: stdout };
    match execute(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}

pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
