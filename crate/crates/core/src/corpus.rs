//! Dialogue data model, the JSON corpus format, and a synthetic generator
//! that walks a known state machine to produce labeled dialogues.
//!
//! Corpus file layout:
//!
//! ```json
//! [ { "id": "d0", "turns": [ { "sys": "...", "usr": "...", "state": 0 } ] } ]
//! ```
//!
//! `state` may be `null` (or absent) for unlabeled data, but a dialogue is
//! either fully labeled or not labeled at all.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtterancePair {
    pub system_text: String,
    pub user_text: String,
    pub gold_state: Option<usize>,
}

impl UtterancePair {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            gold_state: None,
        }
    }

    pub fn labeled(mut self, state: usize) -> Self {
        self.gold_state = Some(state);
        self
    }

    /// System and user text joined by a space.
    pub fn text(&self) -> String {
        match (self.system_text.is_empty(), self.user_text.is_empty()) {
            (false, false) => format!("{} {}", self.system_text, self.user_text),
            (false, true) => self.system_text.clone(),
            _ => self.user_text.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub pairs: Vec<UtterancePair>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, pairs: Vec<UtterancePair>) -> Result<Self> {
        let d = Self {
            id: id.into(),
            pairs,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Input(format!("dialogue {:?} has no turns", self.id)));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.system_text.is_empty() && p.user_text.is_empty() {
                return Err(Error::Input(format!(
                    "dialogue {:?} turn {i}: both utterances are empty",
                    self.id
                )));
            }
        }
        let labeled = self.pairs.iter().filter(|p| p.gold_state.is_some()).count();
        if labeled != 0 && labeled != self.pairs.len() {
            return Err(Error::Input(format!(
                "dialogue {:?}: gold states must be present on all turns or none",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gold_states(&self) -> Option<Vec<usize>> {
        self.pairs.iter().map(|p| p.gold_state).collect()
    }
}

/// Gold state sequences of every dialogue, or `None` if any is unlabeled.
pub fn gold_sequences(corpus: &[Dialogue]) -> Option<Vec<Vec<usize>>> {
    corpus.iter().map(Dialogue::gold_states).collect()
}

pub fn corpus_to_json(corpus: &[Dialogue]) -> String {
    let records: Vec<Value> = corpus
        .iter()
        .map(|d| {
            let turns: Vec<Value> = d
                .pairs
                .iter()
                .map(|p| {
                    let mut m = Map::new();
                    m.insert("sys".into(), Value::from(p.system_text.clone()));
                    m.insert("usr".into(), Value::from(p.user_text.clone()));
                    m.insert(
                        "state".into(),
                        p.gold_state.map_or(Value::Null, Value::from),
                    );
                    Value::Object(m)
                })
                .collect();
            let mut m = Map::new();
            m.insert("id".into(), Value::from(d.id.clone()));
            m.insert("turns".into(), Value::Array(turns));
            Value::Object(m)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&Value::Array(records)).expect("json encoding");
    s.push('\n');
    s
}

pub fn corpus_from_json(text: &str) -> Result<Vec<Dialogue>> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("corpus JSON: {e}")))?;
    let Value::Array(records) = root else {
        return Err(Error::Parse("corpus must be a JSON array".into()));
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| parse_dialogue(i, r))
        .collect()
}

fn parse_dialogue(index: usize, record: &Value) -> Result<Dialogue> {
    let obj = record
        .as_object()
        .ok_or_else(|| Error::Parse(format!("record {index} is not an object")))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        _ => {
            return Err(Error::Parse(format!(
                "record {index}: missing or non-string field \"id\""
            )))
        }
    };
    let field_err = |turn: usize, field: &str| {
        Error::Parse(format!(
            "dialogue {id:?} turn {turn}: missing or invalid field \"{field}\""
        ))
    };
    let turns = obj
        .get("turns")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse(format!("dialogue {id:?}: missing or invalid field \"turns\"")))?;
    let mut pairs = Vec::with_capacity(turns.len());
    for (t, turn) in turns.iter().enumerate() {
        let sys = turn
            .get("sys")
            .and_then(Value::as_str)
            .ok_or_else(|| field_err(t, "sys"))?;
        let usr = turn
            .get("usr")
            .and_then(Value::as_str)
            .ok_or_else(|| field_err(t, "usr"))?;
        let state = match turn.get("state") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| field_err(t, "state"))? as usize),
        };
        pairs.push(UtterancePair {
            system_text: sys.to_string(),
            user_text: usr.to_string(),
            gold_state: state,
        });
    }
    Dialogue::new(id.clone(), pairs)
        .map_err(|e| Error::Parse(format!("dialogue {id:?}: {e}")))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    corpus_from_json(&text)
}

pub fn save_corpus(corpus: &[Dialogue], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), corpus_to_json(corpus)).map_err(|e| Error::io(path, e))
}

/// Utterance templates for one state. `{slot}` placeholders are filled from
/// the structure's slot lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTemplates {
    pub system: Vec<String>,
    pub user: Vec<String>,
}

/// A known dialogue state machine with per-state text templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStructure {
    pub states: Vec<String>,
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub templates: Vec<StateTemplates>,
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
}

impl GroundTruthStructure {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::Input("structure has no states".into()));
        }
        if self.init.len() != n || self.trans.len() != n || self.templates.len() != n {
            return Err(Error::Input(format!(
                "structure with {n} states has init/trans/templates of lengths {}/{}/{}",
                self.init.len(),
                self.trans.len(),
                self.templates.len()
            )));
        }
        check_distribution("init", &self.init)?;
        for (i, row) in self.trans.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Input(format!("trans row {i} has {} entries", row.len())));
            }
            check_distribution(&format!("trans row {i}"), row)?;
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.system.is_empty() && t.user.is_empty() {
                return Err(Error::Input(format!("state {i} has no templates")));
            }
        }
        Ok(())
    }

    /// States whose only outgoing transition is to themselves.
    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.n_states())
            .filter(|&i| self.trans[i][i] == 1.0)
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let s: Self =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("structure JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("json encoding")
    }

    fn fill(&self, template: &str, rng: &mut RngState) -> String {
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) => {
                    let name = &after[..close];
                    match self.slots.get(name).filter(|v| !v.is_empty()) {
                        Some(values) => out.push_str(&values[rng.below(values.len())]),
                        None => {
                            out.push('{');
                            out.push_str(name);
                            out.push('}');
                        }
                    }
                    rest = &after[close + 1..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }

    fn render(&self, state: usize, rng: &mut RngState) -> UtterancePair {
        let t = &self.templates[state];
        let pick = |list: &[String], rng: &mut RngState| -> String {
            if list.is_empty() {
                String::new()
            } else {
                let tpl = &list[rng.below(list.len())];
                self.fill(tpl, rng)
            }
        };
        let sys = pick(&t.system, rng);
        let usr = pick(&t.user, rng);
        UtterancePair::new(sys, usr).labeled(state)
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Input(format!("{what} has negative or NaN entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Upper bound on resampling attempts per dialogue before giving up.
const MAX_ATTEMPTS: usize = 10_000;

/// Markov walks over `structure`. A walk stops after emitting an absorbing
/// state or when it reaches `max_turns`; walks shorter than `min_turns` are
/// discarded and redrawn. `usize::MAX` means no turn cap.
pub fn generate_synthetic(
    structure: &GroundTruthStructure,
    n_dialogues: usize,
    min_turns: usize,
    max_turns: usize,
    rng: &mut RngState,
) -> Result<Vec<Dialogue>> {
    structure.validate()?;
    if min_turns < 1 || max_turns < min_turns {
        return Err(Error::Parameter(format!(
            "need 1 <= min_turns <= max_turns, got {min_turns}..{max_turns}"
        )));
    }
    let absorbing = structure.absorbing_states();
    if max_turns == usize::MAX && absorbing.is_empty() {
        return Err(Error::Parameter(
            "structure has no absorbing state and no turn cap".into(),
        ));
    }
    let mut corpus = Vec::with_capacity(n_dialogues);
    for d in 0..n_dialogues {
        let mut attempts = 0;
        let pairs = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Parameter(format!(
                    "could not draw a walk of at least {min_turns} turns in {MAX_ATTEMPTS} attempts"
                )));
            }
            let mut pairs = Vec::new();
            let mut state = rng
                .categorical(&structure.init)
                .ok_or_else(|| Error::Input("initial distribution is all zero".into()))?;
            loop {
                pairs.push(structure.render(state, rng));
                if absorbing.contains(&state) || pairs.len() >= max_turns {
                    break;
                }
                state = rng
                    .categorical(&structure.trans[state])
                    .ok_or_else(|| Error::Input(format!("trans row {state} is all zero")))?;
            }
            if pairs.len() >= min_turns {
                break pairs;
            }
        };
        corpus.push(Dialogue::new(format!("d{d:05}"), pairs)?);
    }
    Ok(corpus)
}

fn templates(system: &[&str], user: &[&str]) -> StateTemplates {
    StateTemplates {
        system: system.iter().map(|s| s.to_string()).collect(),
        user: user.iter().map(|s| s.to_string()).collect(),
    }
}

fn slots(entries: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
    entries
        .iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
        .collect()
}

/// Bus information requests: greet and ask for the origin, ask for the
/// departure time, query the timetable, inform the result, offer more help,
/// goodbye (absorbing).
pub fn bus_structure() -> GroundTruthStructure {
    GroundTruthStructure {
        states: [
            "greet/ask-loc",
            "ask-time",
            "query+kb_return",
            "inform-result",
            "anything-else",
            "goodbye",
        ]
        .map(String::from)
        .to_vec(),
        init: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        trans: vec![
            vec![0.2, 0.8, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.2, 0.8, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.3, 0.7, 0.0],
            vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.5],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ],
        templates: vec![
            templates(
                &["hello , where are you leaving from ?", "hi , which stop do you start at ?"],
                &["i am at {loc} .", "from {loc} please .", "{loc} ."],
            ),
            templates(
                &["when do you want to leave ?", "what time are you going ?"],
                &["{time} .", "around {time} .", "i leave at {time} ."],
            ),
            templates(
                &["QUERY loc={loc} time={time} RET bus={bus}", "QUERY from={loc} at={time} RET route={bus}"],
                &["ok", "sure"],
            ),
            templates(
                &["bus {bus} leaves at {time} .", "take bus {bus} , it departs {time} ."],
                &["thank you .", "great , thanks .", "got it ."],
            ),
            templates(
                &["anything else ?", "can i help with something else ?"],
                &["yes , another trip .", "one more question ."],
            ),
            templates(&["goodbye .", "have a nice trip , bye ."], &["bye .", "see you ."]),
        ],
        slots: slots(&[
            ("loc", &["penn", "downtown", "airport", "campus", "station", "mall"]),
            ("time", &["now", "noon", "5 pm", "9 am", "tonight", "7 am"]),
            ("bus", &["12", "28", "61c", "54"]),
        ]),
    }
}

/// Weather information requests, laid out like [`bus_structure`].
pub fn weather_structure() -> GroundTruthStructure {
    GroundTruthStructure {
        states: [
            "greet/ask-city",
            "ask-date",
            "query+kb_return",
            "inform-forecast",
            "anything-else",
            "goodbye",
        ]
        .map(String::from)
        .to_vec(),
        init: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        trans: vec![
            vec![0.15, 0.85, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.15, 0.85, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.2, 0.8, 0.0],
            vec![0.0, 0.4, 0.0, 0.0, 0.0, 0.6],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ],
        templates: vec![
            templates(
                &["hi , which city are you asking about ?", "welcome , what city ?"],
                &["{city} .", "the weather in {city} .", "i am in {city} ."],
            ),
            templates(
                &["for which day ?", "what date do you need ?"],
                &["{day} .", "for {day} please ."],
            ),
            templates(
                &["QUERY city={city} day={day} RET sky={sky}", "QUERY loc={city} date={day} RET cond={sky}"],
                &["ok", "sure"],
            ),
            templates(
                &["it will be {sky} in {city} {day} .", "expect {sky} weather {day} ."],
                &["thanks .", "good to know ."],
            ),
            templates(
                &["need anything else ?", "any other question ?"],
                &["yes , another day .", "what about later ?"],
            ),
            templates(&["goodbye .", "bye , stay dry ."], &["bye .", "thanks , bye ."]),
        ],
        slots: slots(&[
            ("city", &["seattle", "boston", "austin", "denver", "miami"]),
            ("day", &["today", "tomorrow", "monday", "friday", "sunday"]),
            ("sky", &["sunny", "rainy", "cloudy", "windy", "snowy"]),
        ]),
    }
}

const CHAIN_WORDS: [[&str; 4]; 8] = [
    ["alpha", "amber", "apple", "anchor"],
    ["bravo", "blue", "banana", "bridge"],
    ["charlie", "crimson", "cherry", "castle"],
    ["delta", "dusk", "date", "dune"],
    ["echo", "emerald", "elder", "engine"],
    ["foxtrot", "fern", "fig", "forest"],
    ["golf", "gold", "grape", "garden"],
    ["hotel", "hazel", "hops", "harbor"],
];

/// `k` states in a deterministic cycle `i -> i+1 mod k`, uniform start, and
/// one fixed sentence pair per state.
pub fn chain_structure(k: usize) -> Result<GroundTruthStructure> {
    if k < 1 {
        return Err(Error::Parameter("chain needs at least one state".into()));
    }
    let mut trans = vec![vec![0.0; k]; k];
    for (i, row) in trans.iter_mut().enumerate() {
        row[(i + 1) % k] = 1.0;
    }
    let word = |i: usize, j: usize| {
        let base = CHAIN_WORDS[i % CHAIN_WORDS.len()][j];
        if i < CHAIN_WORDS.len() {
            base.to_string()
        } else {
            format!("{base}{}", i / CHAIN_WORDS.len())
        }
    };
    let templates = (0..k)
        .map(|i| StateTemplates {
            system: vec![format!("{} {} {} ?", word(i, 0), word(i, 1), word(i, 2))],
            user: vec![format!("{} {} .", word(i, 3), word(i, 0))],
        })
        .collect();
    Ok(GroundTruthStructure {
        states: (0..k).map(|i| format!("step-{i}")).collect(),
        init: vec![1.0 / k as f64; k],
        trans,
        templates,
        slots: BTreeMap::new(),
    })
}

/// Built-in structures: `bus`, `weather`, and `chain-2` .. `chain-8`.
pub fn default_structures() -> BTreeMap<String, GroundTruthStructure> {
    let mut m = BTreeMap::new();
    m.insert("bus".to_string(), bus_structure());
    m.insert("weather".to_string(), weather_structure());
    for k in 2..=8 {
        m.insert(format!("chain-{k}"), chain_structure(k).expect("k >= 1"));
    }
    m
}

/// Look up a built-in by name; `chain-<k>` accepts any `k >= 1`.
pub fn structure_by_name(name: &str) -> Result<GroundTruthStructure> {
    if let Some(s) = default_structures().remove(name) {
        return Ok(s);
    }
    if let Some(k) = name.strip_prefix("chain-").and_then(|k| k.parse().ok()) {
        return chain_structure(k);
    }
    let names: Vec<String> = default_structures().into_keys().collect();
    Err(Error::Input(format!(
        "unknown structure {name:?}; built-ins: {}, chain-<k>",
        names.join(", ")
    )))
}
