//! Corpus directories: `manifest.json`, one WFDS file per (site, env) and
//! the source traces as CSV under `traces/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wflab::defense::{DefenseConfig, OverheadSummary};
use wflab::traffic::{
    extract_windows, format_csv_trace, parse_csv_trace, part_sizes, read_dataset, write_dataset, DatasetSplit,
    SampleVector, Trace, DEFAULT_RATIOS,
};
use wflab::{Error, FormatError, Result};

pub const CORPUS_FORMAT: &str = "wflab-corpus-1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub file: String,
    pub epoch_tag: String,
    /// Windows this trace contributes to the dataset file, in order.
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub file: String,
    pub site: u16,
    pub env: u16,
    pub traces: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseRecord {
    pub config: DefenseConfig,
    pub overhead: OverheadSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub window: usize,
    pub stride: usize,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub defense: Option<DefenseRecord>,
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cell_name(site: u16, env: u16) -> String {
    format!("site{site:03}_env{env:02}")
}

/// Writes traces grouped by (site, env) in input order.
pub fn write_corpus(
    dir: &Path,
    traces: &[Trace],
    window: usize,
    stride: usize,
    defense: Option<DefenseRecord>,
) -> Result<CorpusManifest> {
    let trace_dir = dir.join("traces");
    create_dir(&trace_dir)?;
    let mut groups: BTreeMap<(u16, u16), Vec<&Trace>> = BTreeMap::new();
    for t in traces {
        groups.entry((t.site_label, t.env_id)).or_default().push(t);
    }
    let mut files = Vec::with_capacity(groups.len());
    for ((site, env), group) in groups {
        let name = cell_name(site, env);
        let mut samples = Vec::new();
        let mut entries = Vec::with_capacity(group.len());
        for (i, t) in group.iter().enumerate() {
            let file = format!("traces/{name}_t{i:03}.csv");
            write_text(&dir.join(&file), &format_csv_trace(t))?;
            let w = extract_windows(t, window, stride)?;
            entries.push(TraceEntry {
                file,
                epoch_tag: t.epoch_tag.clone(),
                windows: w.len(),
            });
            samples.extend(w);
        }
        let file = format!("{name}.wfds");
        write_dataset(dir.join(&file), &samples)?;
        files.push(FileEntry {
            file,
            site,
            env,
            traces: entries,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        window,
        stride,
        files,
        defense,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, m: &CorpusManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(m).expect("manifest serializes") + "\n";
    write_text(&dir.join(MANIFEST), &json)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))?;
    if m.format != CORPUS_FORMAT {
        return Err(FormatError::Malformed(format!("unknown corpus format {:?}", m.format)).into());
    }
    Ok(m)
}

pub fn load_traces(dir: &Path, m: &CorpusManifest) -> Result<Vec<Trace>> {
    let mut out = Vec::new();
    for f in &m.files {
        for t in &f.traces {
            let path = dir.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            out.push(parse_csv_trace(&bytes, f.site, f.env, &t.epoch_tag)?);
        }
    }
    Ok(out)
}

/// Which dataset files to read.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub envs: Vec<u16>,
    pub sites: Option<usize>,
}

impl Selection {
    fn keeps(&self, f: &FileEntry, site_rank: usize) -> bool {
        (self.envs.is_empty() || self.envs.contains(&f.env)) && self.sites.is_none_or(|n| site_rank < n)
    }
}

/// Splits the selected files by trace: with three or more traces in a file
/// the last trace's windows are test, the previous trace's validation and
/// the rest training. Files with fewer traces split every trace's windows
/// into contiguous 50/25/25% blocks.
pub fn load_split(dir: &Path, m: &CorpusManifest, sel: &Selection) -> Result<DatasetSplit> {
    let mut sites: Vec<u16> = m.files.iter().map(|f| f.site).collect();
    sites.sort_unstable();
    sites.dedup();
    let mut out = DatasetSplit::default();
    let mut any = false;
    for f in &m.files {
        let rank = sites.binary_search(&f.site).expect("collected above");
        if !sel.keeps(f, rank) {
            continue;
        }
        any = true;
        let samples = read_dataset(dir.join(&f.file))?;
        let total: usize = f.traces.iter().map(|t| t.windows).sum();
        if total != samples.len() {
            return Err(FormatError::Malformed(format!(
                "{} holds {} windows but the manifest lists {total}",
                f.file,
                samples.len()
            ))
            .into());
        }
        let mut rest: &[SampleVector] = &samples;
        let n = f.traces.len();
        for (i, t) in f.traces.iter().enumerate() {
            let (mine, tail) = rest.split_at(t.windows);
            rest = tail;
            if n >= 3 {
                let part = if i + 1 == n {
                    &mut out.test
                } else if i + 2 == n {
                    &mut out.validation
                } else {
                    &mut out.train
                };
                part.extend_from_slice(mine);
            } else {
                let [a, b, _] = part_sizes(mine.len(), DEFAULT_RATIOS);
                out.train.extend_from_slice(&mine[..a]);
                out.validation.extend_from_slice(&mine[a..a + b]);
                out.test.extend_from_slice(&mine[a + b..]);
            }
        }
    }
    if !any {
        return Err(Error::Data("the selection matches no dataset file".into()));
    }
    Ok(out)
}

pub fn path_of(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("missing {what}")))
}
