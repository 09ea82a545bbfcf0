use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Prompt for a multimodal captioner producing one caption per sampled frame.
pub const PROMPT_TEMPLATE: &str = "The provided image is a frame sampled from the video, which describes {video caption}. Based on the video's content, provide a caption for the provided image.";

pub fn pseudo_caption_prompt(video_caption: &str) -> String {
    PROMPT_TEMPLATE.replace("{video caption}", video_caption)
}

/// Reads `video_id \t frame_index \t caption` lines. Every id must end up
/// with exactly `frames` captions, indices `0..frames`.
pub fn load_pseudo_captions(path: &Path, frames: usize) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut slots: BTreeMap<String, Vec<Option<String>>> = BTreeMap::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let fmt = |message: String| Error::Format { path: path.to_path_buf(), offset: at, message: format!("line {}: {message}", n + 1) };
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(idx), Some(caption)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(fmt("expected 3 tab-separated fields".into()));
        };
        if id.is_empty() {
            return Err(fmt("empty video id".into()));
        }
        let idx: usize = idx.trim().parse().map_err(|_| fmt(format!("frame index {idx:?} is not a number")))?;
        if idx >= frames {
            return Err(fmt(format!("frame index {idx} out of range for {frames} frames")));
        }
        if caption.trim().is_empty() {
            return Err(fmt("empty caption".into()));
        }
        let slot = &mut slots.entry(id.to_owned()).or_insert_with(|| vec![None; frames])[idx];
        if slot.is_some() {
            return Err(fmt(format!("duplicate caption for {id:?} frame {idx}")));
        }
        *slot = Some(caption.to_owned());
    }
    slots
        .into_iter()
        .map(|(id, caps)| {
            let have = caps.iter().filter(|c| c.is_some()).count();
            if have != frames {
                return Err(Error::Arity { what: "pseudo captions per video", expected: frames, actual: have });
            }
            Ok((id, caps.into_iter().flatten().collect()))
        })
        .collect()
}

pub fn write_pseudo_captions<'a>(path: &Path, items: impl IntoIterator<Item = (&'a str, &'a [String])>) -> Result<()> {
    let mut out = String::new();
    for (id, caps) in items {
        for (k, c) in caps.iter().enumerate() {
            if c.contains(['\t', '\n']) || id.contains(['\t', '\n']) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: out.len(),
                    message: format!("caption or id for {id:?} contains a tab or line break"),
                });
            }
            writeln!(out, "{id}\t{k}\t{c}").expect("writing to a String");
        }
    }
    fs::write(path, out)?;
    Ok(())
}
