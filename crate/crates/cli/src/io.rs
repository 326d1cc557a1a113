//! Input parsing and byte-stable output.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use adl_core::market_model::fmt17;
use adl_core::{CrossMarginAccount, PriceModel, ScenarioSet, SingleAssetAccount};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A number or a vector of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Numbers {
    One(f64),
    Many(Vec<f64>),
}

impl Numbers {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Numbers::One(x) => vec![*x],
            Numbers::Many(v) => v.clone(),
        }
    }

    fn scalar(&self) -> Option<f64> {
        match self {
            Numbers::One(x) => Some(*x),
            Numbers::Many(v) if v.len() == 1 => Some(v[0]),
            Numbers::Many(_) => None,
        }
    }
}

/// One entry of an accounts file. A present `equity` back-solves the entry
/// price and `p_entry` may then be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountRecord {
    pub id: String,
    pub q: Numbers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_entry: Option<Numbers>,
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equity: Option<f64>,
}

impl From<&SingleAssetAccount> for AccountRecord {
    fn from(a: &SingleAssetAccount) -> Self {
        Self {
            id: a.id.clone(),
            q: Numbers::One(a.q),
            p_entry: Some(Numbers::One(a.p_entry)),
            margin: a.margin,
            equity: None,
        }
    }
}

impl From<&CrossMarginAccount> for AccountRecord {
    fn from(a: &CrossMarginAccount) -> Self {
        Self {
            id: a.id.clone(),
            q: Numbers::Many(a.q.clone()),
            p_entry: Some(Numbers::Many(a.p_entry.clone())),
            margin: a.margin,
            equity: None,
        }
    }
}

/// Numeric ids sort numerically, everything else lexicographically after them.
fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn parse_records(text: &str, origin: &str) -> Result<Vec<AccountRecord>> {
    let raw: Vec<Value> = serde_json::from_str(text).with_context(|| format!("{origin}: expected a JSON array of accounts"))?;
    let mut records = raw
        .into_iter()
        .enumerate()
        .map(|(n, v)| serde_json::from_value::<AccountRecord>(v).with_context(|| format!("{origin}: account record {n} is malformed")))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| id_order(&a.id, &b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        bail!("{origin}: duplicate account id {:?}", w[0].id);
    }
    Ok(records)
}

pub fn single_accounts_from_str(text: &str, origin: &str, p_tau: f64) -> Result<Vec<SingleAssetAccount>> {
    parse_records(text, origin)?
        .iter()
        .map(|r| {
            let ctx = || format!("{origin}: account {:?}", r.id);
            let q = r.q.scalar().with_context(|| format!("{}: q must be a single number", ctx()))?;
            let acct = match (r.equity, &r.p_entry) {
                (Some(e), _) => SingleAssetAccount::from_equity(r.id.clone(), q, e, r.margin, p_tau),
                (None, Some(p)) => {
                    let p = p.scalar().with_context(|| format!("{}: p_entry must be a single number", ctx()))?;
                    SingleAssetAccount::new(r.id.clone(), q, p, r.margin, p_tau)
                }
                (None, None) => bail!("{}: needs p_entry or equity", ctx()),
            };
            acct.with_context(ctx)
        })
        .collect()
}

pub fn cross_accounts_from_str(text: &str, origin: &str, p_tau: &[f64]) -> Result<Vec<CrossMarginAccount>> {
    parse_records(text, origin)?
        .iter()
        .map(|r| {
            let ctx = || format!("{origin}: account {:?}", r.id);
            let q = r.q.to_vec();
            if q.len() != p_tau.len() {
                bail!("{}: {} positions for {} assets", ctx(), q.len(), p_tau.len());
            }
            let acct = match (r.equity, &r.p_entry) {
                (Some(e), _) => CrossMarginAccount::from_equity(r.id.clone(), q, e, r.margin, p_tau),
                (None, Some(p)) => CrossMarginAccount::new(r.id.clone(), q, p.to_vec(), r.margin, p_tau),
                (None, None) => bail!("{}: needs p_entry or equity", ctx()),
            };
            acct.with_context(ctx)
        })
        .collect()
}

pub fn load_single_accounts(path: &Path, p_tau: f64) -> Result<Vec<SingleAssetAccount>> {
    single_accounts_from_str(&read_text(path)?, &path.display().to_string(), p_tau)
}

pub fn load_cross_accounts(path: &Path, p_tau: &[f64]) -> Result<Vec<CrossMarginAccount>> {
    cross_accounts_from_str(&read_text(path)?, &path.display().to_string(), p_tau)
}

/// `--model` takes inline JSON or a path to a JSON file.
pub fn load_model(arg: &str) -> Result<PriceModel> {
    let (text, origin) = if arg.trim_start().starts_with('{') {
        (arg.to_string(), "inline model".to_string())
    } else {
        (read_text(Path::new(arg))?, arg.to_string())
    };
    let model: PriceModel = serde_json::from_str(&text).with_context(|| format!("{origin}: not a price model"))?;
    model.validate().with_context(|| format!("{origin}: invalid model"))?;
    Ok(model)
}

pub fn load_scenarios(path: &Path) -> Result<ScenarioSet> {
    ScenarioSet::from_csv(&read_text(path)?).with_context(|| format!("{}: invalid scenario CSV", path.display()))
}

/// Pretty JSON with every float written to 17 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    emit(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn emit(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&fmt17(n.as_f64().unwrap_or(f64::NAN))),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) if items.iter().all(|x| x.is_number()) => {
            out.push('[');
            for (j, x) in items.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                emit(x, depth, out);
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (j, x) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                emit(x, depth + 1, out);
                out.push_str(if j + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (j, (k, x)) in map.iter().enumerate() {
                let _ = write!(out, "{}{}: ", pad(depth + 1), Value::String(k.clone()));
                emit(x, depth + 1, out);
                out.push_str(if j + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Minimal CSV quoting for free-text fields.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Output directory handle; every artifact goes through here.
pub struct OutDir<'a> {
    root: &'a Path,
}

impl<'a> OutDir<'a> {
    pub fn create(root: &'a Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &to_json(value)?)
    }
}
