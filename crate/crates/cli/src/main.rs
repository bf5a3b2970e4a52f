use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use optmat::oracle::{Checker, Limits, Report};
use optmat::store::{self, canonical};
use optmat::treedec::{self, Node, ProbeVerdict, TreeFragment};
use optmat::{BlockRef, Error, MatrixState, StageId, Verdict};
use serde_json::{json, Value};

/// Environment variable naming the directory for default store files.
const STORE_DIR_VAR: &str = "OPTMAT_STORE_DIR";

const EXIT_VIOLATED: u8 = 1;
const EXIT_INCONCLUSIVE: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_IO: u8 = 74;

#[derive(Parser)]
#[command(
    name = "optmat",
    version,
    about = "Build and check n-optimal matrices of partitions of the naturals"
)]
struct Cli {
    /// Arity of the matrix (number of columns).
    #[arg(long, global = true, default_value_t = 2)]
    n: usize,
    /// Fuel for each membership query; accepts forms like 1e6.
    #[arg(long, global = true, default_value = "1e6", value_parser = parse_count)]
    fuel: u64,
    /// Cap on the total fuel of one command.
    #[arg(long, global = true, value_parser = parse_count)]
    pool: Option<u64>,
    /// Memo store file. Defaults to `$OPTMAT_STORE_DIR/n<N>.json` when the
    /// variable is set; otherwise nothing is persisted.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Also write the JSON result to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Block assignment of every number below the window, for all rows below `--rows`.
    Gen {
        #[arg(long, default_value_t = 2)]
        rows: u32,
        #[arg(long, default_value = "1000", value_parser = parse_count)]
        window: u64,
    },
    /// Which block of one partition holds a number, or whether a given block does.
    Decide {
        #[arg(long)]
        row: u32,
        #[arg(long)]
        column: u32,
        #[arg(long, value_parser = parse_count)]
        value: u64,
        #[arg(long)]
        index: Option<u64>,
    },
    /// Window checks of the matrix properties.
    Verify {
        #[command(subcommand)]
        what: Verify,
    },
    /// Finite tree fragments split by the matrix.
    Tree {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        branch: u64,
        #[command(subcommand)]
        what: TreeCmd,
    },
    /// Print the memo store as canonical JSON.
    Export,
}

#[derive(Subcommand)]
enum Verify {
    /// Each number below the window lies in exactly one block of the stage.
    Partition {
        #[arg(long)]
        row: u32,
        #[arg(long)]
        column: u32,
        #[arg(long, default_value = "1000", value_parser = parse_count)]
        window: u64,
    },
    /// A chain of blocks down one column keeps meeting above each bound.
    Agreement {
        #[arg(long)]
        column: u32,
        /// Block index for rows 0, 1, ... of the column.
        #[arg(long, value_delimiter = ',', required = true)]
        chain: Vec<u64>,
        #[arg(long, default_value = "1e5", value_parser = parse_count)]
        window: u64,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        bounds: Vec<u64>,
    },
    /// One block from each column: the blocks share exactly one number.
    Optimality {
        /// Blocks as `row:column:index`, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_ref, required = true)]
        refs: Vec<BlockRef>,
        #[arg(long, default_value = "1e5", value_parser = parse_count)]
        window: u64,
    },
    /// Blocks from fewer than n columns meet above each bound.
    Subtuple {
        #[arg(long, value_delimiter = ',', value_parser = parse_ref, required = true)]
        refs: Vec<BlockRef>,
        #[arg(long, default_value = "1e5", value_parser = parse_count)]
        window: u64,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        bounds: Vec<u64>,
    },
    /// Partition, optimality and subtuple checks over every small block combination.
    Sweep {
        #[arg(long, default_value_t = 2)]
        max_row: u32,
        #[arg(long, default_value_t = 2)]
        max_index: u64,
        #[arg(long, default_value = "1000", value_parser = parse_count)]
        window: u64,
        #[arg(long, value_delimiter = ',', default_value = "10,100")]
        bounds: Vec<u64>,
    },
}

#[derive(Subcommand)]
enum TreeCmd {
    /// Every materialized node with its class labels.
    Decompose,
    /// Exhaustive checks of the split on the fragment.
    Check,
    /// Shifted class intersection above the first anchor.
    Claim {
        /// Nodes as dot-separated coordinates, e.g. `0.3`.
        #[arg(long = "anchor", value_parser = parse_node, required = true)]
        anchors: Vec<Node>,
        #[arg(long = "target", value_parser = parse_node, required = true)]
        targets: Vec<Node>,
        /// Column per anchor; a single value applies to all.
        #[arg(long = "column", required = true)]
        columns: Vec<usize>,
    },
    /// Both sides of the rigidity equation at one pair of nodes.
    Probe {
        #[arg(long, value_parser = parse_node)]
        s: Node,
        #[arg(long, value_parser = parse_node)]
        q: Node,
        #[arg(long)]
        column: usize,
    },
    /// Class label under the split that only uses row 0.
    Simple {
        #[arg(long, value_parser = parse_node)]
        node: Node,
        #[arg(long)]
        column: usize,
    },
}

/// Integer flag that also accepts scientific notation, as long as the
/// value is a whole number: `1e6`, `2.5e3`.
fn parse_count(s: &str) -> Result<u64, String> {
    let bad = || format!("`{s}` is not a non-negative integer");
    let (mant, exp) = match s.split_once(['e', 'E']) {
        Some((m, e)) => (m, e.parse::<u32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    if int.is_empty() && frac.is_empty()
        || !(int.chars().chain(frac.chars())).all(|c| c.is_ascii_digit())
    {
        return Err(bad());
    }
    let frac = frac.trim_end_matches('0');
    let shift = exp.checked_sub(frac.len() as u32).ok_or_else(bad)?;
    let digits: u128 = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let value = 10u128
        .checked_pow(shift)
        .and_then(|p| digits.checked_mul(p))
        .ok_or_else(bad)?;
    u64::try_from(value).map_err(|_| bad())
}

fn parse_ref(s: &str) -> Result<BlockRef, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [r, c, i] = parts[..] else {
        return Err(format!("`{s}`: expected row:column:index"));
    };
    let num = |x: &str| {
        x.parse::<u64>()
            .map_err(|_| format!("`{s}`: expected row:column:index"))
    };
    let (r, c, i) = (num(r)?, num(c)?, num(i)?);
    let r = u32::try_from(r).map_err(|_| format!("`{s}`: row too large"))?;
    let c = u32::try_from(c).map_err(|_| format!("`{s}`: column too large"))?;
    Ok(BlockRef::new(r, c, i))
}

fn parse_node(s: &str) -> Result<Node, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('.')
        .map(|x| {
            x.parse::<u64>()
                .map_err(|_| format!("`{s}`: expected dot-separated naturals"))
        })
        .collect()
}

enum Outcome {
    Pass,
    Violated,
    Inconclusive,
}

fn outcome_of(violated: bool, undecided: bool) -> Outcome {
    if violated {
        Outcome::Violated
    } else if undecided {
        Outcome::Inconclusive
    } else {
        Outcome::Pass
    }
}

fn report_outcome(r: &Report) -> Outcome {
    outcome_of(!r.violations.is_empty(), r.undecided_instances > 0)
}

/// Exclusive hold on a store file, released on drop.
struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    fn acquire(store: &Path) -> optmat::Result<Self> {
        let path = store.with_extension("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(StoreLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Store(format!(
                "{} is held by another process",
                store.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn store_path(cli: &Cli) -> Option<PathBuf> {
    cli.store.clone().or_else(|| {
        std::env::var_os(STORE_DIR_VAR)
            .map(|dir| PathBuf::from(dir).join(format!("n{}.json", cli.n)))
    })
}

fn open_state(cli: &Cli, path: Option<&Path>) -> optmat::Result<MatrixState> {
    match path {
        Some(p) if p.exists() => {
            let state = store::load(p)?;
            if state.n() != cli.n {
                return Err(Error::Usage(format!(
                    "store {} holds a matrix with n={}, not {}",
                    p.display(),
                    state.n(),
                    cli.n
                )));
            }
            Ok(state)
        }
        _ => MatrixState::new(cli.n),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Violated) => ExitCode::from(EXIT_VIOLATED),
        Ok(Outcome::Inconclusive) => ExitCode::from(EXIT_INCONCLUSIVE),
        Err(e) => {
            eprintln!("optmat: {e}");
            ExitCode::from(match e {
                Error::Usage(_) | Error::Domain(_) | Error::Overflow(_) => EXIT_USAGE,
                _ => EXIT_IO,
            })
        }
    }
}

fn run(cli: &Cli) -> optmat::Result<Outcome> {
    let path = store_path(cli);
    if let Some(dir) = path.as_ref().and_then(|p| p.parent()) {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let _lock = path.as_deref().map(StoreLock::acquire).transpose()?;
    let mut state = open_state(cli, path.as_deref())?;
    let mut limits = Limits::per_query(cli.fuel);
    if let Some(pool) = cli.pool {
        limits = limits.with_pool(pool);
    }
    let (value, outcome) = execute(cli, &mut state, limits)?;
    if let Some(p) = &path {
        store::save(&state, p)?;
    }
    let text = canonical(&value);
    if let Some(out) = &cli.out {
        let tmp = out.with_extension("tmp");
        std::fs::write(&tmp, &text)?;
        std::fs::rename(&tmp, out)?;
    }
    print!("{text}");
    Ok(outcome)
}

fn execute(cli: &Cli, state: &mut MatrixState, limits: Limits) -> optmat::Result<(Value, Outcome)> {
    let n = cli.n;
    match &cli.cmd {
        Cmd::Gen { rows, window } => {
            let mut stages = Vec::new();
            let mut undecided = false;
            let mut spent = 0u64;
            for row in 0..*rows {
                for column in 0..n as u32 {
                    let stage = StageId::new(row, column);
                    let mut blocks = Vec::new();
                    for v in 0..*window {
                        let budget = match limits.pool {
                            Some(pool) => limits.fuel.min(pool.saturating_sub(spent)),
                            None => limits.fuel,
                        };
                        let (verdict, used) = state.block_of_metered(stage, v, budget)?;
                        spent += used;
                        blocks.push(match verdict {
                            Verdict::In(i) => json!(i),
                            _ => {
                                undecided = true;
                                Value::Null
                            }
                        });
                    }
                    stages.push(json!({"row": row, "column": column, "blocks": blocks}));
                }
            }
            let v = json!({"n": n, "window": window, "rows": rows, "stages": stages});
            Ok((v, outcome_of(false, undecided)))
        }
        Cmd::Decide {
            row,
            column,
            value,
            index,
        } => {
            let stage = StageId::new(*row, *column);
            let mut v = json!({"row": row, "column": column, "value": value});
            let verdict = match index {
                Some(i) => state.membership(BlockRef { stage, index: *i }, *value, cli.fuel)?,
                None => state.block_of(stage, *value, cli.fuel)?,
            };
            if let Some(i) = index {
                v["index"] = json!(i);
            }
            let undecided = match verdict {
                Verdict::In(b) => {
                    v["verdict"] = json!("in");
                    v["block"] = json!(b);
                    false
                }
                Verdict::NotIn => {
                    v["verdict"] = json!("not_in");
                    false
                }
                Verdict::Undecided(spent) => {
                    v["verdict"] = json!("undecided");
                    v["fuel_spent"] = json!(spent);
                    true
                }
            };
            Ok((v, outcome_of(false, undecided)))
        }
        Cmd::Verify { what } => {
            let mut c = Checker::new(state, limits);
            match what {
                Verify::Partition {
                    row,
                    column,
                    window,
                } => {
                    let r = c.check_partition(StageId::new(*row, *column), *window)?;
                    Ok((r.to_json(), report_outcome(&r)))
                }
                Verify::Agreement {
                    column,
                    chain,
                    window,
                    bounds,
                } => {
                    let r = c.check_column_agreement(*column, chain, *window, bounds)?;
                    Ok((r.to_json(), report_outcome(&r)))
                }
                Verify::Optimality { refs, window } => {
                    let r = c.check_optimality(refs, *window)?;
                    Ok((r.to_json(), report_outcome(&r)))
                }
                Verify::Subtuple {
                    refs,
                    window,
                    bounds,
                } => {
                    let r = c.check_subtuple_infinite(refs, *window, bounds)?;
                    Ok((r.to_json(), report_outcome(&r)))
                }
                Verify::Sweep {
                    max_row,
                    max_index,
                    window,
                    bounds,
                } => {
                    let s = c.sweep(*max_row, *max_index, *window, bounds)?;
                    let o = outcome_of(!s.pass(), s.undecided_instances() > 0);
                    Ok((s.to_json(), o))
                }
            }
        }
        Cmd::Tree {
            depth,
            branch,
            what,
        } => {
            if let TreeCmd::Simple { node, column } = what {
                let label = treedec::simple_split(n, node, *column)?;
                let v = json!({"node": node, "column": column, "label": label});
                return Ok((v, Outcome::Pass));
            }
            let mut f = TreeFragment::new(state, *depth, *branch, limits)?;
            match what {
                TreeCmd::Decompose => {
                    let v = f.to_json()?;
                    let undecided = v["levels"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .flat_map(|l| l["nodes"].as_array().into_iter().flatten())
                        .any(|node| {
                            node["labels"]
                                .as_array()
                                .is_some_and(|ls| ls.iter().any(Value::is_null))
                        });
                    Ok((v, outcome_of(false, undecided)))
                }
                TreeCmd::Check => {
                    let checks = f.check_invariants()?;
                    let violated = checks.iter().any(|c| !c.pass());
                    let undecided = checks.iter().any(|c| c.undecided > 0);
                    let v = serde_json::to_value(&checks)?;
                    Ok((json!({"checks": v}), outcome_of(violated, undecided)))
                }
                TreeCmd::Claim {
                    anchors,
                    targets,
                    columns,
                } => {
                    let columns = if columns.len() == 1 {
                        vec![columns[0]; anchors.len()]
                    } else {
                        columns.clone()
                    };
                    let r = f.claim_witnesses(anchors, targets, &columns)?;
                    let empty = r.members.is_empty();
                    let o = outcome_of(empty && r.undecided.is_empty(), empty);
                    Ok((serde_json::to_value(&r)?, o))
                }
                TreeCmd::Probe { s, q, column } => {
                    let r = f.rigidity_probe(s, q, *column)?;
                    let o = match r.verdict {
                        ProbeVerdict::Pass => Outcome::Pass,
                        ProbeVerdict::Fail => Outcome::Violated,
                        ProbeVerdict::Inconclusive => Outcome::Inconclusive,
                    };
                    Ok((serde_json::to_value(&r)?, o))
                }
                TreeCmd::Simple { .. } => unreachable!("handled above"),
            }
        }
        Cmd::Export => Ok((store::to_json(state), Outcome::Pass)),
    }
}
