//! Plain-text configuration: `[section]` headers, `key = value` lines, `#` comments.
//!
//! Sections: `[pipeline]`, `[model]`, `[scenario]`, `[output]`. Unknown sections and
//! keys are rejected with the offending line number. Missing keys take their default and
//! produce a notice. Scenario files written by [`scenario_to_text`] use the same syntax
//! with one `[event]` section per planted event.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backend::{MockModelConfig, PlantedEvent, ScenarioSpec};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Sections in file order; a name may repeat.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDocument {
    pub sections: Vec<Section>,
}

fn cfg_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Config { line, reason: reason.into() }
}

pub fn parse_document(text: &str) -> Result<ConfigDocument> {
    let mut doc = ConfigDocument::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| cfg_err(line, format!("malformed section header `{trimmed}`")))?;
            doc.sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected `key = value`, found `{trimmed}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(cfg_err(line, "empty key"));
        }
        let section = doc
            .sections
            .last_mut()
            .ok_or_else(|| cfg_err(line, format!("key `{key}` appears before any [section]")))?;
        if section.entries.iter().any(|e| e.key == key) {
            return Err(cfg_err(line, format!("duplicate key `{key}` in [{}]", section.name)));
        }
        section.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
    }
    Ok(doc)
}

struct Reader<'a> {
    section: &'a Section,
    notices: &'a mut Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(section: &'a Section, allowed: &[&str], notices: &'a mut Vec<String>) -> Result<Self> {
        for e in &section.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(cfg_err(
                    e.line,
                    format!("unknown key `{}` in [{}] (expected one of: {})", e.key, section.name, allowed.join(", ")),
                ));
            }
        }
        Ok(Self { section, notices })
    }

    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.section.entries.iter().find(|e| e.key == key)
    }

    fn parse_with<V>(&mut self, key: &str, default: V, show: &str, f: impl Fn(&str) -> Result<V, String>) -> Result<V> {
        match self.entry(key) {
            Some(e) => f(&e.value).map_err(|r| cfg_err(e.line, format!("{key}: {r}"))),
            None => {
                self.notices.push(format!("[{}] {key} not set, using default {show}", self.section.name));
                Ok(default)
            }
        }
    }

    fn get<V>(&mut self, key: &str, default: V) -> Result<V>
    where
        V: FromStr + std::fmt::Display,
        V::Err: std::fmt::Display,
    {
        let show = default.to_string();
        self.parse_with(key, default, &show, |s| s.parse::<V>().map_err(|e| format!("cannot parse `{s}`: {e}")))
    }

    fn required<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        let e = self
            .entry(key)
            .ok_or_else(|| cfg_err(self.section.line, format!("[{}] requires `{key}`", self.section.name)))?;
        e.value.parse::<V>().map_err(|err| cfg_err(e.line, format!("{key}: cannot parse `{}`: {err}", e.value)))
    }
}

fn parse_list<V: FromStr>(s: &str) -> Result<Vec<V>, String>
where
    V::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<V>().map_err(|e| format!("bad list item `{}`: {e}", p.trim())))
        .collect()
}

/// Parses a comma-separated list such as `5,9,14,20`.
pub fn parse_layer_list(s: &str) -> Result<Vec<usize>> {
    parse_list(s).map_err(Error::InvalidArgument)
}

/// Generation parameters for a random planted-event scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub n_clips: usize,
    pub t_frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub n_events: usize,
    pub event_tokens: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            n_clips: 8,
            t_frames: 16,
            tokens_per_frame: 196,
            dim: 16,
            n_events: 2,
            event_tokens: 64,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl ScenarioParams {
    pub fn build(&self) -> Result<ScenarioSpec> {
        ScenarioSpec::with_random_events(
            self.n_clips,
            self.t_frames,
            self.tokens_per_frame,
            self.dim,
            self.n_events,
            self.event_tokens,
            self.noise_scale,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OutputPaths {
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub dir: Option<PathBuf>,
}

/// Everything a config file can set, with the notices raised for defaulted keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub model: MockModelConfig,
    pub scenario: ScenarioParams,
    pub output: OutputPaths,
    pub notices: Vec<String>,
}

const PIPELINE_KEYS: &[&str] = &[
    "clip_size",
    "max_mem",
    "tokens_per_frame",
    "n_select",
    "window",
    "layers",
    "aggregation",
    "selector",
    "mmr_lambda",
    "retrieval_budget",
    "retrieval_k",
    "similarity",
    "seed",
];
const MODEL_KEYS: &[&str] = &["dim", "n_layers", "n_heads", "head_dim", "caption_len", "seed"];
const SCENARIO_KEYS: &[&str] =
    &["n_clips", "t_frames", "tokens_per_frame", "dim", "n_events", "event_tokens", "noise_scale", "seed"];
const OUTPUT_KEYS: &[&str] = &["report", "trace", "dir"];

fn read_pipeline(r: &mut Reader<'_>) -> Result<PipelineConfig> {
    let d = PipelineConfig::default();
    let layers_default = d.layer_subset.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    Ok(PipelineConfig {
        clip_size: r.get("clip_size", d.clip_size)?,
        max_mem: r.get("max_mem", d.max_mem)?,
        tokens_per_frame: r.get("tokens_per_frame", d.tokens_per_frame)?,
        n_select: r.get("n_select", d.n_select)?,
        window: r.get("window", d.window)?,
        layer_subset: r.parse_with("layers", d.layer_subset.clone(), &layers_default, parse_list)?,
        aggregation: r.parse_with("aggregation", d.aggregation, "avg", |s| s.parse().map_err(|e: Error| e.to_string()))?,
        selector: r.parse_with("selector", d.selector, "attention", |s| s.parse().map_err(|e: Error| e.to_string()))?,
        mmr_lambda: r.get("mmr_lambda", d.mmr_lambda)?,
        retrieval_budget: r.get("retrieval_budget", d.retrieval_budget)?,
        retrieval_k: r.parse_with("retrieval_k", None, "fill", |s| {
            if s == "fill" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("expected a count or `fill`: {e}"))
            }
        })?,
        similarity: r.parse_with("similarity", d.similarity, "pooled", |s| s.parse().map_err(|e: Error| e.to_string()))?,
        seed: r.get("seed", d.seed)?,
    })
}

fn read_model(r: &mut Reader<'_>) -> Result<MockModelConfig> {
    let d = MockModelConfig::default();
    Ok(MockModelConfig {
        dim: r.get("dim", d.dim)?,
        n_layers: r.get("n_layers", d.n_layers)?,
        n_heads: r.get("n_heads", d.n_heads)?,
        head_dim: r.get("head_dim", d.head_dim)?,
        caption_len: r.get("caption_len", d.caption_len)?,
        seed: r.get("seed", d.seed)?,
    })
}

fn read_scenario(r: &mut Reader<'_>) -> Result<ScenarioParams> {
    let d = ScenarioParams::default();
    Ok(ScenarioParams {
        n_clips: r.get("n_clips", d.n_clips)?,
        t_frames: r.get("t_frames", d.t_frames)?,
        tokens_per_frame: r.get("tokens_per_frame", d.tokens_per_frame)?,
        dim: r.get("dim", d.dim)?,
        n_events: r.get("n_events", d.n_events)?,
        event_tokens: r.get("event_tokens", d.event_tokens)?,
        noise_scale: r.get("noise_scale", d.noise_scale)?,
        seed: r.get("seed", d.seed)?,
    })
}

fn read_output(r: &Reader<'_>) -> OutputPaths {
    let path = |k: &str| r.entry(k).map(|e| PathBuf::from(&e.value));
    OutputPaths { report: path("report"), trace: path("trace"), dir: path("dir") }
}

/// Parses a run configuration. Absent sections keep their defaults.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let doc = parse_document(text)?;
    let mut cfg = FileConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for section in &doc.sections {
        let name = section.name.as_str();
        if seen.contains(&name) {
            return Err(cfg_err(section.line, format!("section [{name}] appears twice")));
        }
        seen.push(name);
        let notices = &mut cfg.notices;
        match name {
            "pipeline" => cfg.pipeline = read_pipeline(&mut Reader::new(section, PIPELINE_KEYS, notices)?)?,
            "model" => cfg.model = read_model(&mut Reader::new(section, MODEL_KEYS, notices)?)?,
            "scenario" => cfg.scenario = read_scenario(&mut Reader::new(section, SCENARIO_KEYS, notices)?)?,
            "output" => cfg.output = read_output(&Reader::new(section, OUTPUT_KEYS, notices)?),
            other => {
                return Err(cfg_err(
                    section.line,
                    format!("unknown section [{other}] (expected pipeline, model, scenario or output)"),
                ))
            }
        }
    }
    for name in ["pipeline", "model", "scenario"] {
        if !seen.contains(&name) {
            cfg.notices.push(format!("section [{name}] absent, using defaults"));
        }
    }
    Ok(cfg)
}

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

/// Writes a scenario with its events spelled out, so it reloads without re-sampling.
pub fn scenario_to_text(spec: &ScenarioSpec) -> String {
    let mut out = String::from("# planted-event scenario\n[scenario]\n");
    let _ = writeln!(out, "n_clips = {}", spec.n_clips);
    let _ = writeln!(out, "t_frames = {}", spec.t_frames);
    let _ = writeln!(out, "tokens_per_frame = {}", spec.tokens_per_frame);
    let _ = writeln!(out, "dim = {}", spec.dim);
    let _ = writeln!(out, "noise_scale = {}", spec.noise_scale);
    let _ = writeln!(out, "seed = {}", spec.seed);
    for e in &spec.events {
        let _ = writeln!(out, "\n[event]");
        let _ = writeln!(out, "clip = {}", e.clip_id);
        let _ = writeln!(out, "indices = {}", join(&e.token_indices));
        let _ = writeln!(out, "concept = {}", join(e.concept.as_slice()));
    }
    out
}

/// Reads a file written by [`scenario_to_text`].
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let doc = parse_document(text)?;
    let mut notices = Vec::new();
    let mut spec: Option<ScenarioSpec> = None;
    for section in &doc.sections {
        match section.name.as_str() {
            "scenario" => {
                if spec.is_some() {
                    return Err(cfg_err(section.line, "section [scenario] appears twice"));
                }
                let r = Reader::new(
                    section,
                    &["n_clips", "t_frames", "tokens_per_frame", "dim", "noise_scale", "seed"],
                    &mut notices,
                )?;
                spec = Some(ScenarioSpec {
                    n_clips: r.required("n_clips")?,
                    t_frames: r.required("t_frames")?,
                    tokens_per_frame: r.required("tokens_per_frame")?,
                    dim: r.required("dim")?,
                    events: Vec::new(),
                    noise_scale: r.required("noise_scale")?,
                    seed: r.required("seed")?,
                });
            }
            "event" => {
                let s = spec
                    .as_mut()
                    .ok_or_else(|| cfg_err(section.line, "[event] before [scenario]"))?;
                let r = Reader::new(section, &["clip", "indices", "concept"], &mut notices)?;
                let list = |key: &str| -> Result<&Entry> {
                    r.entry(key).ok_or_else(|| cfg_err(section.line, format!("[event] requires `{key}`")))
                };
                let indices = list("indices")?;
                let concept = list("concept")?;
                let token_indices = parse_list(&indices.value).map_err(|m| cfg_err(indices.line, m))?;
                let values: Vec<f64> = parse_list(&concept.value).map_err(|m| cfg_err(concept.line, m))?;
                s.events.push(PlantedEvent {
                    clip_id: r.required("clip")?,
                    token_indices,
                    concept: Vector::new(values).map_err(|e| cfg_err(concept.line, e.to_string()))?,
                });
            }
            other => return Err(cfg_err(section.line, format!("unknown section [{other}] in scenario file"))),
        }
    }
    let spec = spec.ok_or_else(|| cfg_err(0, "scenario file has no [scenario] section"))?;
    spec.validate()?;
    Ok(spec)
}
