//! Tile manifests: a `# seed=<n> config=<text>` header followed by one
//! `slide_id,x,y,side,label,split` line per tile.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{BENIGN, MALIGNANT};

pub const DEFAULT_TILE_SIDE: usize = 224;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

/// One square tile; `(x, y)` is its top-left corner at level 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileRecord {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub label: usize,
    pub split: Split,
}

impl TileRecord {
    pub fn new(slide_id: &str, x: usize, y: usize, side: usize, label: usize) -> Self {
        Self {
            slide_id: slide_id.to_owned(),
            x,
            y,
            side,
            label,
            split: Split::Train,
        }
    }

    /// Level-0 center pixel, `(x + side/2, y + side/2)`.
    pub fn center(&self) -> (usize, usize) {
        (self.x + self.side / 2, self.y + self.side / 2)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<TileRecord>,
    pub seed: Option<u64>,
    pub config: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TileRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `(benign, malignant)` counts, optionally restricted to one split.
    pub fn label_counts(&self, split: Option<Split>) -> (usize, usize) {
        let mut c = (0, 0);
        for r in self.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            if r.label == MALIGNANT {
                c.1 += 1;
            } else {
                c.0 += 1;
            }
        }
        c
    }

    pub fn to_text(&self) -> String {
        let seed = self.seed.map_or("-".to_owned(), |s| s.to_string());
        let mut out = format!("# seed={seed} config={}\n", self.config);
        for r in &self.records {
            out += &format!("{},{},{},{},{},{}\n", r.slide_id, r.x, r.y, r.side, r.label, r.split);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (n, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 1));
            if let Some(header) = line.strip_prefix('#') {
                if n == 0 {
                    let header = header.trim();
                    let (seed, config) = header.split_once(" config=").unwrap_or((header, ""));
                    let seed = seed.strip_prefix("seed=").ok_or_else(|| bad("header lacks seed="))?;
                    m.seed = if seed == "-" {
                        None
                    } else {
                        Some(seed.parse().map_err(|_| bad("bad seed"))?)
                    };
                    m.config = config.to_owned();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 comma-separated fields"));
            }
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad number"));
            let label = num(f[4])?;
            if label != BENIGN && label != MALIGNANT {
                return Err(bad("label must be 0 or 1"));
            }
            m.records.push(TileRecord {
                slide_id: f[0].to_owned(),
                x: num(f[1])?,
                y: num(f[2])?,
                side: num(f[3])?,
                label,
                split: f[5].trim().parse()?,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
