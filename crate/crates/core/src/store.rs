//! Persistent memo store.
//!
//! A store is a canonical JSON document (UTF-8, sorted keys, integers only):
//!
//! ```json
//! {"convention":"cantor-right-nested/v1","format":"optmat-store","n":2,
//!  "stages":[{"blocks":[{"index":0,"steps":[[0,0,2,true],...]}],"column":0,"row":1}],
//!  "version":1}
//! ```
//!
//! Each step is `[x, y, z, y_reused]`. Loading replays the steps in row-major
//! stage order, which rebuilds ownership, exclusion keys and scan cursors
//! exactly as the original run left them.

use std::path::Path;

use serde_json::{json, Value};

use crate::codec::{StageId, CONVENTION};
use crate::error::{Error, Result};
use crate::matrix::{BlockRef, MatrixState, Schedule, Step};

pub const FORMAT: &str = "optmat-store";
pub const VERSION: u64 = 1;

/// Fuel granted to each replayed step for locating its values in earlier stages.
const REPLAY_FUEL: u64 = 1 << 40;

/// Serializes a value as canonical JSON.
pub fn canonical(value: &Value) -> String {
    // serde_json's default map is ordered, so keys come out sorted.
    let mut s = serde_json::to_string(value).expect("JSON values always serialize");
    s.push('\n');
    s
}

pub fn to_json(state: &MatrixState) -> Value {
    let mut stages = Vec::new();
    for stage in state.built_stages() {
        let blocks: Vec<Value> = (0..state.block_count(stage))
            .map(|i| {
                let t = state
                    .transcript(BlockRef {
                        stage,
                        index: i as u64,
                    })
                    .expect("started block");
                let steps: Vec<Value> = t
                    .steps
                    .iter()
                    .map(|s| json!([s.x, s.y, s.z, s.y_reused]))
                    .collect();
                json!({"index": i, "steps": steps})
            })
            .collect();
        stages.push(json!({"row": stage.row, "column": stage.column, "blocks": blocks}));
    }
    json!({
        "format": FORMAT,
        "version": VERSION,
        "convention": CONVENTION,
        "n": state.n(),
        "stages": stages,
    })
}

pub fn from_json(value: &Value, schedule: Schedule) -> Result<MatrixState> {
    let bad = |what: &str| Error::Store(format!("malformed store: {what}"));
    if value.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(bad("missing format tag"));
    }
    match value.get("version").and_then(Value::as_u64) {
        Some(VERSION) => {}
        v => return Err(Error::Store(format!("unsupported store version {v:?}"))),
    }
    let convention = value.get("convention").and_then(Value::as_str);
    if convention != Some(CONVENTION) {
        return Err(Error::Store(format!(
            "store uses codec convention {convention:?}, expected {CONVENTION}"
        )));
    }
    let n = value
        .get("n")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("n"))? as usize;
    let mut state = MatrixState::with_schedule(n, schedule)?;
    let stages = value
        .get("stages")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("stages"))?;
    let mut last: Option<StageId> = None;
    for st in stages {
        let row = st
            .get("row")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("row"))?;
        let column = st
            .get("column")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("column"))?;
        let stage = StageId::new(row as u32, column as u32);
        if row == 0 || column as usize >= n || last.is_some_and(|l| l >= stage) {
            return Err(bad("stage list out of order or out of range"));
        }
        last = Some(stage);
        let blocks = st
            .get("blocks")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("blocks"))?;
        for (i, b) in blocks.iter().enumerate() {
            if b.get("index").and_then(Value::as_u64) != Some(i as u64) {
                return Err(bad("block indices must be 0, 1, 2, ..."));
            }
            let steps = b
                .get("steps")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("steps"))?;
            let block = BlockRef {
                stage,
                index: i as u64,
            };
            state.start_block(block);
            for s in steps {
                state.replay_step(
                    block,
                    parse_step(s).ok_or_else(|| bad("step"))?,
                    REPLAY_FUEL,
                )?;
            }
        }
    }
    Ok(state)
}

fn parse_step(v: &Value) -> Option<Step> {
    let a = v.as_array()?;
    if a.len() != 4 {
        return None;
    }
    Some(Step {
        x: a[0].as_u64()?,
        y: a[1].as_u64()?,
        z: a[2].as_u64()?,
        y_reused: a[3].as_bool()?,
    })
}

pub fn save(state: &MatrixState, path: &Path) -> Result<()> {
    let text = canonical(&to_json(state));
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MatrixState> {
    let text = std::fs::read_to_string(path)?;
    from_json(&serde_json::from_str(&text)?, Schedule::default())
}
