//! Checkpoint files.
//!
//! Layout: the magic line `TRN1`, a textual manifest (architecture, seeds,
//! freeze and proxy state, then one `tensor <name> <offset> <len> <dims..>`
//! line per tensor) closed by `end`, then the concatenated tensor payloads
//! in the format of [`crate::tensor::write_tensor`]. Offsets are relative
//! to the first payload byte.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::SingleStreamModel;
use crate::model::{Classifier, FreezeState, TriResNet, NUM_STREAMS};
use crate::nn::{Mode, Param, Parameterized};
use crate::stream::{Scale, StreamConfig};
use crate::tensor::{read_tensor, write_tensor, DType, Element, Tape, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"TRN1";
pub const FORMAT_VERSION: u32 = 1;

/// Either kind of network a checkpoint can hold.
#[derive(Clone, Debug)]
pub enum AnyModel<T> {
    TriResNet(TriResNet<T>),
    SingleStream(SingleStreamModel<T>),
}

impl<T: Element> AnyModel<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::TriResNet(_) => "triresnet",
            AnyModel::SingleStream(_) => "single_stream",
        }
    }
}

impl<T: Element> Classifier<T> for AnyModel<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            AnyModel::TriResNet(m) => m.forward(tape, x, mode),
            AnyModel::SingleStream(m) => m.forward(tape, x, mode),
        }
    }

    fn commit_running_stats(&mut self, tape: &Tape<T>) {
        match self {
            AnyModel::TriResNet(m) => m.commit_running_stats(tape),
            AnyModel::SingleStream(m) => m.commit_running_stats(tape),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            AnyModel::TriResNet(m) => m.num_classes(),
            AnyModel::SingleStream(m) => m.num_classes(),
        }
    }
}

impl<T: Element> Parameterized<T> for AnyModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            AnyModel::TriResNet(m) => m.visit_params(f),
            AnyModel::SingleStream(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            AnyModel::TriResNet(m) => m.visit_params_mut(f),
            AnyModel::SingleStream(m) => m.visit_params_mut(f),
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            AnyModel::TriResNet(m) => m.visit_buffers(f),
            AnyModel::SingleStream(m) => m.visit_buffers(f),
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            AnyModel::TriResNet(m) => m.visit_buffers_mut(f),
            AnyModel::SingleStream(m) => m.visit_buffers_mut(f),
        }
    }
}

fn config_lines(cfg: &StreamConfig, num_classes: usize) -> Vec<String> {
    let d = cfg.stage_depths;
    vec![
        format!("stage_depths {} {} {} {}", d[0], d[1], d[2], d[3]),
        format!("base_width {}", cfg.base_width),
        format!("in_channels {}", cfg.in_channels),
        format!("scale {}", cfg.scale),
        format!("num_classes {num_classes}"),
    ]
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Serializes a model to checkpoint bytes.
pub fn encode_checkpoint<T: Element>(model: &AnyModel<T>) -> Result<Vec<u8>> {
    let mut lines = vec![
        format!("format_version {FORMAT_VERSION}"),
        format!("kind {}", model.kind()),
        format!("dtype {}", T::DTYPE.name()),
    ];
    match model {
        AnyModel::TriResNet(m) => {
            lines.extend(config_lines(m.config(), m.num_classes()));
            let s = m.seeds();
            lines.push(format!("seeds {} {} {}", s[0], s[1], s[2]));
            lines.push(format!("head_seed {}", m.head_seed()));
            let fz = m.freeze_state();
            lines.push(format!(
                "frozen {} {} {} {}",
                flag(fz.streams[0]),
                flag(fz.streams[1]),
                flag(fz.streams[2]),
                flag(fz.head)
            ));
            let proxies: Vec<String> = (0..NUM_STREAMS)
                .map(|i| m.proxy_seed(i).map_or("-".to_owned(), |s| s.to_string()))
                .collect();
            lines.push(format!("proxies {}", proxies.join(" ")));
        }
        AnyModel::SingleStream(m) => {
            lines.extend(config_lines(m.config(), m.num_classes()));
            lines.push(format!("seeds {}", m.seed()));
            lines.push(format!("head_seed {}", m.head_seed()));
        }
    }
    let mut payload = Vec::new();
    let state = model.state_snapshot();
    lines.push(format!("tensor_count {}", state.len()));
    for (name, t) in &state {
        let offset = payload.len();
        write_tensor(&mut payload, t)?;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        lines.push(format!(
            "tensor {name} {offset} {} {}",
            payload.len() - offset,
            dims.join(" ")
        ));
    }
    lines.push("end".to_owned());
    let mut out = Vec::with_capacity(payload.len() + 4096);
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    for l in lines {
        out.extend_from_slice(l.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
    shape: Vec<usize>,
}

struct Manifest {
    fields: HashMap<String, String>,
    tensors: Vec<TensorEntry>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Manifest {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(format!("manifest lacks {key:?}")))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("manifest field {key:?} is malformed")))
    }

    fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>> {
        self.get(key)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| fmt_err(format!("manifest field {key:?} is malformed"))))
            .collect()
    }

    fn stream_config(&self) -> Result<StreamConfig> {
        let d: Vec<usize> = self.list("stage_depths")?;
        let stage_depths: [usize; 4] = d
            .try_into()
            .map_err(|_| fmt_err("stage_depths needs four entries"))?;
        Ok(StreamConfig {
            stage_depths,
            base_width: self.parse("base_width")?,
            in_channels: self.parse("in_channels")?,
            scale: self
                .get("scale")?
                .parse::<Scale>()
                .map_err(|e| fmt_err(e.to_string()))?,
        })
    }
}

fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != b'\n' {
        return Err(fmt_err("missing TRN1 magic"));
    }
    let mut pos = 5;
    let mut fields = HashMap::new();
    let mut tensors = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("manifest is not terminated by 'end'"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| fmt_err("manifest is not UTF-8"))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "tensor" {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() < 4 {
                return Err(fmt_err(format!("bad tensor entry {line:?}")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad tensor entry {line:?}")));
            tensors.push(TensorEntry {
                name: parts[0].to_owned(),
                offset: num(parts[1])?,
                len: num(parts[2])?,
                shape: parts[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        } else {
            fields.insert(key.to_owned(), rest.to_owned());
        }
    }
    Ok((Manifest { fields, tensors }, pos))
}

fn parse_flags(m: &Manifest) -> Result<Vec<bool>> {
    m.get("frozen")?
        .split_whitespace()
        .map(|v| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(fmt_err("frozen flags must be 0 or 1")),
        })
        .collect()
}

/// Parses checkpoint bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<AnyModel<T>> {
    let (manifest, payload_start) = parse_manifest(bytes)?;
    let version: u32 = manifest.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    if manifest.get("dtype")? != T::DTYPE.name() {
        return Err(fmt_err(format!(
            "checkpoint holds {} tensors, {} requested",
            manifest.get("dtype")?,
            T::DTYPE.name()
        )));
    }
    let cfg = manifest.stream_config()?;
    let num_classes: usize = manifest.parse("num_classes")?;
    let head_seed: u64 = manifest.parse("head_seed")?;
    let seeds: Vec<u64> = manifest.list("seeds")?;
    let mut model = match manifest.get("kind")? {
        "triresnet" => {
            let seeds: [u64; NUM_STREAMS] = seeds.try_into().map_err(|_| fmt_err("triresnet needs three seeds"))?;
            let mut m = TriResNet::new(&cfg, num_classes, seeds, head_seed).map_err(|e| fmt_err(e.to_string()))?;
            let proxies: Vec<&str> = manifest.get("proxies")?.split_whitespace().collect();
            if proxies.len() != NUM_STREAMS {
                return Err(fmt_err("proxies needs three entries"));
            }
            for (i, p) in proxies.iter().enumerate() {
                if *p != "-" {
                    let seed = p.parse().map_err(|_| fmt_err("bad proxy seed"))?;
                    m.attach_proxy_head(i, seed)?;
                }
            }
            let f = parse_flags(&manifest)?;
            if f.len() != NUM_STREAMS + 1 {
                return Err(fmt_err("frozen needs four flags"));
            }
            m.set_freeze_state(FreezeState {
                streams: [f[0], f[1], f[2]],
                head: f[3],
            });
            AnyModel::TriResNet(m)
        }
        "single_stream" => {
            let [seed]: [u64; 1] = seeds.try_into().map_err(|_| fmt_err("single_stream needs one seed"))?;
            AnyModel::SingleStream(
                SingleStreamModel::new(&cfg, num_classes, seed, head_seed).map_err(|e| fmt_err(e.to_string()))?,
            )
        }
        other => return Err(fmt_err(format!("unknown checkpoint kind {other:?}"))),
    };
    let payload = &bytes[payload_start..];
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::new();
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(fmt_err(format!("tensor {} extends past end of file", e.name)));
        };
        let t: Tensor<T> = read_tensor(&mut Cursor::new(&payload[e.offset..end]))?;
        if t.shape() != e.shape.as_slice() {
            return Err(fmt_err(format!("tensor {} shape disagrees with manifest", e.name)));
        }
        loaded.insert(e.name.clone(), t);
    }
    let expected: usize = manifest.parse("tensor_count")?;
    if expected != loaded.len() {
        return Err(fmt_err("tensor_count disagrees with tensor entries"));
    }
    let mut problem: Option<Error> = None;
    let mut used = 0;
    {
        let mut take = |name: &str, slot: &mut Tensor<T>| match loaded.get(name) {
            Some(t) if t.shape() == slot.shape() => {
                *slot = t.clone();
                used += 1;
            }
            Some(_) => {
                problem.get_or_insert_with(|| fmt_err(format!("tensor {name} has the wrong shape")));
            }
            None => {
                problem.get_or_insert_with(|| fmt_err(format!("checkpoint lacks tensor {name}")));
            }
        };
        model.visit_params_mut(&mut |p| {
            let name = p.name().to_owned();
            take(&name, &mut p.value);
        });
        model.visit_buffers_mut(&mut |n, t| take(n, t));
    }
    if let Some(e) = problem {
        return Err(e);
    }
    if used != loaded.len() {
        return Err(fmt_err("checkpoint holds tensors the architecture does not use"));
    }
    Ok(model)
}

/// Writes atomically: the file at `path` is either the old or the new
/// checkpoint, never a partial one.
pub fn save_any_checkpoint<T: Element>(model: &AnyModel<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_any_checkpoint<T: Element>(path: &Path) -> Result<AnyModel<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Element type recorded in a checkpoint's header, read without decoding
/// the tensors.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path)?;
    let (manifest, _) = parse_manifest(&bytes)?;
    let name = manifest.get("dtype")?;
    DType::parse(name).ok_or_else(|| fmt_err(format!("unknown dtype {name:?}")))
}

pub fn save_checkpoint<T: Element>(model: &TriResNet<T>, path: &Path) -> Result<()> {
    save_any_checkpoint(&AnyModel::TriResNet(model.clone()), path)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<TriResNet<T>> {
    match load_any_checkpoint(path)? {
        AnyModel::TriResNet(m) => Ok(m),
        AnyModel::SingleStream(_) => Err(fmt_err("checkpoint holds a single-stream model")),
    }
}
