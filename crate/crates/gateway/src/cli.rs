//! `harmonkit` subcommands.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use harmonkit_core::agent::{
    Agent, CorrectionTable, MockReviewer, Playbook, RemoteConfig, RemoteReviewer, Reviewer, RunOutcome,
    ScriptedPlanner, SessionState,
};
use harmonkit_core::eval::{evaluate, parse_assignment, EvalTask};
use harmonkit_core::mapspec::{
    build_spec, has_errors, parse_spec, serialize_spec, validate_spec, MappingSpec, Severity,
};
use harmonkit_core::matchers::{match_schema, match_values, top_matches, ColumnMatch, MatchMethod, ValueMatchTable};
use harmonkit_core::materialize::{materialize_mapping, union_tables};
use harmonkit_core::provenance::{read_log, replay, trace_value, ProvenanceLog};
use harmonkit_core::table::{load_table, write_table, Table};
use harmonkit_core::vocab::{load_vocabulary, TargetSchema};

use crate::config::ServerConfig;

// Stdout writes that end the command quietly once the reader has gone away,
// as with `| head`.
macro_rules! out {
    ($($t:tt)*) => {
        if let Err(e) = write!(std::io::stdout(), $($t)*) {
            return stdout_failed(e);
        }
    };
}

macro_rules! outln {
    ($($t:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout(), $($t)*) {
            return stdout_failed(e);
        }
    };
}

fn stdout_failed(e: std::io::Error) -> CmdResult {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(Failure::invalid(format!("stdout: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "harmonkit",
    version,
    about = "Harmonize tabular data onto a target data standard"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match every source column to a target attribute.
    MatchSchema {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "tfidf_ngram")]
        method: MatchMethod,
        /// Keep only these columns (comma separated).
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the k most similar attributes for one column.
    TopMatches {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "tfidf_ngram")]
        method: MatchMethod,
    },
    /// Match the values of matched columns to attribute domains.
    MatchValues {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Column matches: `match-schema` output or `{"column": "attribute"}`.
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, default_value = "tfidf_ngram")]
        method: MatchMethod,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile column and value matches into a mapping spec.
    BuildSpec {
        /// `match-schema` output.
        #[arg(long)]
        matches: PathBuf,
        /// `match-values` output.
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long, default_value = "keep")]
        on_missing: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a mapping spec against a source table and vocabulary.
    ValidateSpec {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Apply a mapping spec to a table.
    Materialize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stack tables row-wise, filling missing columns with nulls.
    Union {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Scripted sessions and their provenance logs.
    Session {
        #[command(subcommand)]
        command: SessionCommand,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Configuration file; `harmonkit.toml` is read when present.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        provenance_dir: Option<PathBuf>,
    },
    /// Score predicted matches against ground truth.
    Eval {
        #[arg(long)]
        task: EvalTask,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Run a playbook end to end.
    Run {
        #[arg(long)]
        playbook: PathBuf,
        /// Use the mock reviewer, with this correction table or the playbook's.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        mock: Option<String>,
        /// Directory for the harmonized table and spec; defaults to the current one.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Directory for the provenance log; defaults to the output directory.
        #[arg(long)]
        provenance_dir: Option<PathBuf>,
        #[arg(long)]
        session_id: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Re-execute a provenance log and print the reproduced spec.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Overrides the input directory recorded in the log.
        #[arg(long)]
        input_dir: Option<PathBuf>,
    },
    /// Print the records behind one target value.
    Trace {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        attribute: String,
        #[arg(long)]
        value: String,
    },
}

/// A failed command: message for stderr and the exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    fn usage(message: impl Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::MatchSchema {
            source,
            vocab,
            method,
            columns,
            out,
        } => {
            let table = read_table(&source, columns.as_deref())?;
            let schema = read_vocab(&vocab)?;
            let matches = match_schema(&table, &schema, method).map_err(Failure::invalid)?;
            emit(&serde_json::to_value(&matches).expect("serializes"), out.as_deref())
        }
        Command::TopMatches {
            source,
            vocab,
            column,
            k,
            method,
        } => {
            let table = read_table(&source, None)?;
            let schema = read_vocab(&vocab)?;
            let ranked = top_matches(&table, &column, &schema, k, method).map_err(|e| match k {
                0 => Failure::usage(e),
                _ => Failure::invalid(e),
            })?;
            let v: Vec<Value> = ranked
                .into_iter()
                .map(|(target, score)| json!({"target": target, "score": score}))
                .collect();
            emit(&Value::Array(v), None)
        }
        Command::MatchValues {
            source,
            vocab,
            mapping,
            method,
            out,
        } => {
            let table = read_table(&source, None)?;
            let schema = read_vocab(&vocab)?;
            let pairs = read_pairs(&mapping)?;
            let tables = match_values(&table, &schema, &pairs, method).map_err(Failure::invalid)?;
            for t in tables.iter().filter(|t| t.skipped) {
                eprintln!(
                    "note: `{}` has no enumerated domain; values of `{}` are not matched",
                    t.target_attribute, t.source_column
                );
            }
            emit(&serde_json::to_value(&tables).expect("serializes"), out.as_deref())
        }
        Command::BuildSpec {
            matches,
            values,
            on_missing,
            out,
        } => {
            let column_matches: Vec<ColumnMatch> = read_json_as(&matches)?;
            let value_tables: Vec<ValueMatchTable> = match &values {
                Some(p) => read_json_as(p)?,
                None => Vec::new(),
            };
            let policy = on_missing.parse().map_err(Failure::usage)?;
            let built = build_spec(&column_matches, &value_tables).map_err(Failure::invalid)?;
            let spec = MappingSpec::new(built.entries().to_vec(), policy).map_err(Failure::invalid)?;
            emit_text(&(serialize_spec(&spec) + "\n"), out.as_deref())
        }
        Command::ValidateSpec { spec, source, vocab } => {
            let spec = read_spec(&spec)?;
            let table = read_table(&source, None)?;
            let schema = read_vocab(&vocab)?;
            let diagnostics = validate_spec(&spec, &table, &schema);
            for d in &diagnostics {
                let level = match d.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                outln!("{level}: {d}");
            }
            if has_errors(&diagnostics) {
                return Err(Failure::invalid("mapping spec is invalid"));
            }
            outln!("ok: {} entries", spec.entries().len());
            Ok(())
        }
        Command::Materialize { spec, input, out } => {
            let spec = read_spec(&spec)?;
            let table = read_table(&input, None)?;
            let result = materialize_mapping(&table, &spec).map_err(Failure::invalid)?;
            write_table(&result, &out).map_err(Failure::invalid)
        }
        Command::Union { out, inputs } => {
            let parts = inputs
                .iter()
                .map(|p| read_table(p, None))
                .collect::<Result<Vec<_>, _>>()?;
            let result = union_tables(&parts);
            write_table(&result, &out).map_err(Failure::invalid)?;
            eprintln!("{} rows, {} columns", result.num_rows(), result.columns().len());
            Ok(())
        }
        Command::Session { command } => session(command),
        Command::Serve {
            port,
            config,
            provenance_dir,
        } => {
            let mut cfg = match config {
                Some(p) => ServerConfig::load(&p).map_err(Failure::usage)?,
                None if Path::new("harmonkit.toml").exists() => {
                    ServerConfig::load(Path::new("harmonkit.toml")).map_err(Failure::usage)?
                }
                None => ServerConfig::default(),
            };
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(d) = provenance_dir {
                cfg.provenance_dir = d;
            }
            crate::server::serve_blocking(cfg).map_err(Failure::invalid)
        }
        Command::Eval {
            task,
            pred,
            truth,
            json,
        } => {
            let pred =
                parse_assignment(task, &read_json(&pred)?, &pred.display().to_string()).map_err(Failure::invalid)?;
            let truth =
                parse_assignment(task, &read_json(&truth)?, &truth.display().to_string()).map_err(Failure::invalid)?;
            let report = evaluate(task, &pred, &truth);
            if json {
                outln!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
            } else {
                out!("{}", report.to_table());
            }
            Ok(())
        }
    }
}

fn session(command: SessionCommand) -> CmdResult {
    match command {
        SessionCommand::Run {
            playbook,
            mock,
            out_dir,
            provenance_dir,
            session_id,
            max_steps,
        } => {
            let mut playbook = Playbook::load(&playbook).map_err(Failure::invalid)?;
            if let Some(n) = max_steps {
                playbook.max_steps = n;
            }
            let out_dir = out_dir.unwrap_or_else(|| PathBuf::from("."));
            let provenance_dir = provenance_dir.unwrap_or_else(|| out_dir.clone());
            for d in [&out_dir, &provenance_dir] {
                std::fs::create_dir_all(d).map_err(|e| Failure::invalid(format!("{}: {e}", d.display())))?;
            }
            let reviewer: Box<dyn Reviewer> = match mock {
                Some(path) => {
                    let path = match path.as_str() {
                        "" => playbook.corrections_path(),
                        p => Some(PathBuf::from(p)),
                    };
                    let table = match path {
                        Some(p) => CorrectionTable::load(&p).map_err(Failure::invalid)?,
                        None => CorrectionTable::default(),
                    };
                    Box::new(MockReviewer::with_corrections(table))
                }
                None => {
                    let config = RemoteConfig::from_env().map_err(Failure::usage)?;
                    Box::new(RemoteReviewer::new(config).map_err(Failure::invalid)?)
                }
            };
            let id = session_id.unwrap_or_else(|| playbook.session_id.clone());
            let log = ProvenanceLog::create(&provenance_dir, &id).map_err(Failure::invalid)?;
            let log_path = log.path().map(Path::to_path_buf);
            let config = playbook.session_config(&out_dir, &reviewer.name());
            let mut state = SessionState::start(config, log).map_err(Failure::invalid)?;
            let mut agent = Agent::new(Box::new(ScriptedPlanner::new(playbook.clone())), reviewer);
            let outcome = agent
                .run(&mut state, &mut |q| playbook.answer_for(q))
                .map_err(Failure::invalid)?;
            match outcome {
                RunOutcome::Finished { summary, steps } => {
                    outln!("{summary}");
                    outln!("finished in {steps} steps");
                    if let Some(p) = log_path {
                        outln!("provenance: {}", p.display());
                    }
                    Ok(())
                }
                RunOutcome::Paused { pending } => Err(Failure::invalid(format!(
                    "session paused with unanswered questions: {}",
                    pending.join(", ")
                ))),
            }
        }
        SessionCommand::Replay { log, input_dir } => {
            let records = read_log(&log).map_err(Failure::invalid)?;
            let spec = replay(&records, input_dir.as_deref()).map_err(Failure::invalid)?;
            outln!("{}", serialize_spec(&spec));
            Ok(())
        }
        SessionCommand::Trace { log, attribute, value } => {
            let records = read_log(&log).map_err(Failure::invalid)?;
            for r in trace_value(&records, &attribute, &value) {
                outln!("{}", r.to_json_line());
            }
            Ok(())
        }
    }
}

fn read_table(path: &Path, columns: Option<&[String]>) -> Result<Table, Failure> {
    load_table(path, columns).map_err(Failure::invalid)
}

fn read_vocab(path: &Path) -> Result<TargetSchema, Failure> {
    load_vocabulary(path).map_err(Failure::invalid)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn read_json_as<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_value(read_json(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn read_spec(path: &Path) -> Result<MappingSpec, Failure> {
    parse_spec(&read_text(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

/// Column pairs from `match-schema` output or a `{"column": "attribute"}` object.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    match read_json(path)? {
        Value::Object(map) => Ok(map
            .into_iter()
            .filter_map(|(c, a)| a.as_str().map(|a| (c, a.to_string())))
            .collect()),
        v @ Value::Array(_) => {
            let matches: Vec<ColumnMatch> =
                serde_json::from_value(v).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
            Ok(matches
                .into_iter()
                .filter_map(|m| m.target_attribute.map(|t| (m.source_column, t)))
                .collect())
        }
        _ => Err(Failure::invalid(format!(
            "{}: expected an object or array",
            path.display()
        ))),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> CmdResult {
    emit_text(&(serde_json::to_string_pretty(value).expect("serializes") + "\n"), out)
}

fn emit_text(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::invalid(format!("{}: {e}", p.display()))),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}
