//! Text serialization of [`Mdp`] as TOML.
//!
//! ```toml
//! gamma = 0.9
//! actions = 2
//! terminal = [false, true]
//! initial = [1.0, 0.0]
//!
//! [[outcome]]
//! state = 0
//! action = 1
//! next = 1
//! reward = 10.0
//! prob = 1.0
//! ```
//!
//! Terminal states list no outcomes; their stay action is implied.

use toml::{Table, Value};

use crate::error::{CisError, Result};
use crate::mdp::{Mdp, Outcome};

fn config_err(msg: impl Into<String>) -> CisError {
    CisError::Config(msg.into())
}

fn as_real(v: &Value, what: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(config_err(format!("`{what}` must be a number"))),
    }
}

fn as_index(v: &Value, what: &str) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| config_err(format!("`{what}` must be a non-negative integer")))
}

fn field<'a>(t: &'a Table, key: &str) -> Result<&'a Value> {
    t.get(key).ok_or_else(|| config_err(format!("missing key `{key}`")))
}

fn reject_unknown(t: &Table, allowed: &[&str], ctx: &str) -> Result<()> {
    match t.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(config_err(format!("unknown key `{k}` in {ctx}"))),
        None => Ok(()),
    }
}

pub fn parse_mdp(text: &str) -> Result<Mdp> {
    let doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_err(format!("malformed MDP file: {e}")))?;
    reject_unknown(&doc, &["gamma", "actions", "terminal", "initial", "outcome"], "MDP file")?;

    let gamma = as_real(field(&doc, "gamma")?, "gamma")?;
    let n_actions = as_index(field(&doc, "actions")?, "actions")?;
    let terminal = field(&doc, "terminal")?
        .as_array()
        .ok_or_else(|| config_err("`terminal` must be an array of booleans"))?
        .iter()
        .map(|v| v.as_bool().ok_or_else(|| config_err("`terminal` must be an array of booleans")))
        .collect::<Result<Vec<bool>>>()?;
    let initial = field(&doc, "initial")?
        .as_array()
        .ok_or_else(|| config_err("`initial` must be an array of numbers"))?
        .iter()
        .map(|v| as_real(v, "initial"))
        .collect::<Result<Vec<f64>>>()?;

    let n_states = terminal.len();
    let mut transitions: Vec<Vec<Vec<Outcome>>> = terminal
        .iter()
        .map(|&t| if t { Vec::new() } else { vec![Vec::new(); n_actions] })
        .collect();
    let outcomes = match doc.get("outcome") {
        None => &[][..],
        Some(v) => v
            .as_array()
            .ok_or_else(|| config_err("`outcome` must be an array of tables"))?
            .as_slice(),
    };
    for entry in outcomes {
        let t = entry
            .as_table()
            .ok_or_else(|| config_err("`outcome` must be an array of tables"))?;
        reject_unknown(t, &["state", "action", "next", "reward", "prob"], "outcome")?;
        let x = as_index(field(t, "state")?, "state")?;
        let a = as_index(field(t, "action")?, "action")?;
        if x >= n_states || terminal[x] || a >= n_actions {
            return Err(config_err(format!(
                "outcome for ({x}, {a}) does not name a non-terminal state-action pair"
            )));
        }
        transitions[x][a].push(Outcome::new(
            as_index(field(t, "next")?, "next")?,
            as_real(field(t, "reward")?, "reward")?,
            as_real(field(t, "prob")?, "prob")?,
        ));
    }
    Mdp::new(gamma, n_actions, terminal, initial, transitions)
}

pub fn write_mdp(mdp: &Mdp) -> String {
    let mut doc = Table::new();
    doc.insert("gamma".into(), Value::Float(mdp.gamma()));
    doc.insert("actions".into(), Value::Integer(mdp.n_actions() as i64));
    doc.insert(
        "terminal".into(),
        Value::Array(mdp.terminal_flags().iter().map(|&b| Value::Boolean(b)).collect()),
    );
    doc.insert(
        "initial".into(),
        Value::Array(mdp.initial_dist().iter().map(|&p| Value::Float(p)).collect()),
    );
    let mut outcomes = Vec::new();
    for pair in mdp.nonterminal_pairs() {
        for o in mdp.outcomes(pair.state, pair.action) {
            let mut t = Table::new();
            t.insert("state".into(), Value::Integer(pair.state as i64));
            t.insert("action".into(), Value::Integer(pair.action as i64));
            t.insert("next".into(), Value::Integer(o.next_state as i64));
            t.insert("reward".into(), Value::Float(o.reward));
            t.insert("prob".into(), Value::Float(o.prob));
            outcomes.push(Value::Table(t));
        }
    }
    doc.insert("outcome".into(), Value::Array(outcomes));
    doc.to_string()
}
