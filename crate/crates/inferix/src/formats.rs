//! On-disk formats: raw frame files, VDE reports, manifests, KV page dumps
//! and wire captures.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use inferix_core::frame::GrayFrame;
use inferix_core::kv::{PageSnapshot, PageId, Tier};
use inferix_core::metrics::{ManifestEntry, Split, VdeReport};
use inferix_core::wire::{Decoder, Hello, StreamMessage, WireError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Wire { path: PathBuf, source: WireError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// frames: u16 LE width, u16 LE height, width*height bytes

pub const FRAME_EXT: &str = "gray";

pub fn encode_frame(f: &GrayFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + f.pixels.len());
    out.extend_from_slice(&(f.width as u16).to_le_bytes());
    out.extend_from_slice(&(f.height as u16).to_le_bytes());
    out.extend_from_slice(&f.pixels);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Option<GrayFrame> {
    let w = u16::from_le_bytes(bytes.get(..2)?.try_into().ok()?) as usize;
    let h = u16::from_le_bytes(bytes.get(2..4)?.try_into().ok()?) as usize;
    let px = bytes.get(4..)?;
    if px.len() != w * h {
        return None;
    }
    GrayFrame::new(w, h, px.to_vec())
}

pub fn frame_file_name(chunk: u32, frame: usize) -> String {
    format!("chunk{chunk:04}_frame{frame:03}.{FRAME_EXT}")
}

fn parse_frame_name(name: &str) -> Option<(u32, usize)> {
    let stem = name.strip_suffix(".gray")?;
    let (c, f) = stem.strip_prefix("chunk")?.split_once("_frame")?;
    Some((c.parse().ok()?, f.parse().ok()?))
}

pub fn write_frame(path: &Path, f: &GrayFrame) -> Result<(), FormatError> {
    if f.width > u16::MAX as usize || f.height > u16::MAX as usize {
        return Err(invalid(path, "frame dimensions exceed u16"));
    }
    fs::write(path, encode_frame(f)).map_err(io_err(path))
}

pub fn read_frame(path: &Path) -> Result<GrayFrame, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_frame(&bytes).ok_or_else(|| invalid(path, "header does not match pixel count"))
}

/// Frames of a directory in file-name order. When every name follows
/// [`frame_file_name`] the frames-per-chunk count is returned as well.
pub fn read_frame_dir(dir: &Path) -> Result<(Vec<GrayFrame>, Option<usize>), FormatError> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".gray") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(invalid(dir, "no .gray frame files"));
    }
    let frames = names
        .iter()
        .map(|n| read_frame(&dir.join(n)))
        .collect::<Result<Vec<_>, _>>()?;
    let parsed: Option<Vec<(u32, usize)>> = names.iter().map(|n| parse_frame_name(n)).collect();
    let chunk_len = parsed.and_then(|p| {
        let per = p.iter().filter(|(c, _)| *c == p[0].0).count();
        let ok = p.iter().enumerate().all(|(i, &(c, f))| c as usize == i / per && f == i % per);
        ok.then_some(per)
    });
    Ok((frames, chunk_len))
}

// ---------------------------------------------------------------------------
// wire captures

/// Concatenated wire messages, as a client would have received them.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub hello: Option<Hello>,
    pub messages: Vec<StreamMessage>,
}

impl Capture {
    pub fn frames(&self) -> Vec<GrayFrame> {
        self.messages
            .iter()
            .filter_map(|m| match m {
                StreamMessage::Frame(f) => GrayFrame::new(f.width as usize, f.height as usize, f.pixels.clone()),
                _ => None,
            })
            .collect()
    }
}

pub fn read_capture(path: &Path) -> Result<Capture, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut dec = Decoder::new();
    dec.push(&bytes);
    let mut cap = Capture::default();
    while let Some(m) = dec.next_message().map_err(|source| FormatError::Wire {
        path: path.to_path_buf(),
        source,
    })? {
        if let StreamMessage::Hello(h) = &m {
            cap.hello = Some(h.clone());
        }
        cap.messages.push(m);
    }
    if dec.buffered() > 0 {
        return Err(invalid(path, "trailing partial message"));
    }
    Ok(cap)
}

// ---------------------------------------------------------------------------
// VDE reports

pub fn report_text(r: &VdeReport) -> String {
    let mut out = format!("chunks\t{}\n", r.chunks);
    for (k, v) in r.fields() {
        out.push_str(&format!("{k}\t{v}\n"));
    }
    out
}

pub fn report_json(r: &VdeReport) -> String {
    let mut map = serde_json::Map::new();
    map.insert("chunks".into(), r.chunks.into());
    for (k, v) in r.fields() {
        map.insert(k.into(), v.into());
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("finite report serializes")
}

/// Writes `vde_report.txt` and `vde_report.json` into `dir`.
pub fn write_report(dir: &Path, r: &VdeReport) -> Result<(PathBuf, PathBuf), FormatError> {
    let txt = dir.join("vde_report.txt");
    let json = dir.join("vde_report.json");
    fs::write(&txt, report_text(r)).map_err(io_err(&txt))?;
    fs::write(&json, report_json(r)).map_err(io_err(&json))?;
    Ok((txt, json))
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    source: String,
    class: String,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let csv_err = |source| FormatError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize::<ManifestRow>()
        .map(|r| {
            let r = r.map_err(csv_err)?;
            Ok(ManifestEntry {
                id: r.id,
                source: r.source,
                class: r.class,
                duration_s: r.duration_s,
            })
        })
        .collect()
}

/// `splits`, when given, adds a `split` column.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry], splits: Option<&[Split]>) -> Result<(), FormatError> {
    let csv_err = |source| FormatError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (i, e) in entries.iter().enumerate() {
        w.serialize(ManifestRow {
            id: e.id.clone(),
            source: e.source.clone(),
            class: e.class.clone(),
            duration_s: e.duration_s,
            split: splits.map(|s| s[i].name().to_string()),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// KV dumps
//
// "INFKV1", u32 width, u32 page count, then per page:
// u32 id, u8 tier (0 device, 1 host), u32 filled, filled*width f32 keys, same for values.

pub const KV_MAGIC: &[u8; 6] = b"INFKV1";

pub fn write_kv_dump(w: &mut impl Write, width: usize, pages: &[PageSnapshot]) -> io::Result<()> {
    w.write_all(KV_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(pages.len() as u32).to_le_bytes())?;
    for p in pages {
        w.write_all(&p.id.0.to_le_bytes())?;
        w.write_all(&[match p.tier {
            Tier::Device => 0,
            Tier::Host => 1,
        }])?;
        w.write_all(&(p.filled as u32).to_le_bytes())?;
        for x in p.k_data[..p.filled * width].iter().chain(&p.v_data[..p.filled * width]) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_kv_dump(r: &mut impl Read) -> io::Result<(usize, Vec<PageSnapshot>)> {
    fn u32_of(r: &mut impl Read) -> io::Result<u32> {
        let mut b = [0; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0; 6];
    r.read_exact(&mut magic)?;
    if &magic != KV_MAGIC {
        return Err(bad("not an INFKV1 dump"));
    }
    let width = u32_of(r)? as usize;
    let n = u32_of(r)?;
    let mut pages = Vec::new();
    for _ in 0..n {
        let id = PageId(u32_of(r)?);
        let mut t = [0u8];
        r.read_exact(&mut t)?;
        let tier = match t[0] {
            0 => Tier::Device,
            1 => Tier::Host,
            _ => return Err(bad("bad tier byte")),
        };
        let filled = u32_of(r)? as usize;
        let mut read_vec = || -> io::Result<Vec<f32>> {
            (0..filled * width)
                .map(|_| u32_of(r).map(f32::from_bits))
                .collect()
        };
        let k_data = read_vec()?;
        let v_data = read_vec()?;
        pages.push(PageSnapshot {
            id,
            tier,
            filled,
            k_data,
            v_data,
        });
    }
    Ok((width, pages))
}
