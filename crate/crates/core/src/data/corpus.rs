use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::HashTokenizer;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One clip with its caption and, for training, one pseudo caption per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `[F, N+1, d_input]`
    pub frames: Tensor,
    pub caption: String,
    pub caption_tokens: Vec<u32>,
    pub pseudo_captions: Option<Vec<String>>,
    pub pseudo_tokens: Option<Vec<Vec<u32>>>,
    /// Planted latents, known only for synthetic data.
    pub text_latent: Option<Vec<f64>>,
    pub video_latent: Option<Vec<f64>>,
}

impl VideoRecord {
    pub fn set_pseudo_captions(&mut self, captions: Vec<String>, tokenizer: &HashTokenizer) {
        self.pseudo_tokens = Some(captions.iter().map(|c| tokenizer.encode(c)).collect());
        self.pseudo_captions = Some(captions);
    }

    pub fn clear_pseudo_captions(&mut self) {
        self.pseudo_captions = None;
        self.pseudo_tokens = None;
    }
}

/// Immutable collection of records sharing one frame layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub d_input: usize,
    pub tokenizer: HashTokenizer,
    pub records: Vec<VideoRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    video_id: String,
    frames: Vec<f64>,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_latent: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_latent: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    frames: usize,
    tokens_per_frame: usize,
    d_input: usize,
    tokenizer: HashTokenizer,
    records: Vec<RecordFile>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks frame layout and vocabulary against a model configuration.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.frames != config.frames {
            return Err(Error::Arity { what: "frames per video", expected: config.frames, actual: self.frames });
        }
        if self.tokens_per_frame != config.tokens_per_frame() || self.d_input != config.d_input {
            return Err(Error::Compatibility(format!(
                "corpus frames are [{}, {}] tokens x width, model expects [{}, {}]",
                self.tokens_per_frame,
                self.d_input,
                config.tokens_per_frame(),
                config.d_input
            )));
        }
        if self.tokenizer.vocab_size > config.vocab_size {
            return Err(Error::Compatibility(format!(
                "corpus vocabulary {} exceeds model vocabulary {}",
                self.tokenizer.vocab_size, config.vocab_size
            )));
        }
        Ok(())
    }

    /// First `train` records keep their pseudo captions; the rest lose them.
    pub fn split(&self, train: usize) -> Result<(Corpus, Corpus)> {
        if train == 0 || train >= self.len() {
            return Err(Error::Config(format!("cannot split {} records at {train}", self.len())));
        }
        let mut head = self.clone();
        let mut tail_records = head.records.split_off(train);
        tail_records.iter_mut().for_each(VideoRecord::clear_pseudo_captions);
        let tail = Corpus {
            frames: head.frames,
            tokens_per_frame: head.tokens_per_frame,
            d_input: head.d_input,
            tokenizer: head.tokenizer,
            records: tail_records,
        };
        Ok((head, tail))
    }

    /// Replaces pseudo captions with `captions[video_id]`. Every record must be covered.
    pub fn attach_pseudo_captions(&mut self, captions: &BTreeMap<String, Vec<String>>) -> Result<()> {
        let tok = self.tokenizer;
        for r in &mut self.records {
            let caps = captions
                .get(&r.video_id)
                .ok_or_else(|| Error::EmptyInput(format!("no pseudo captions for video {:?}", r.video_id)))?;
            if caps.len() != self.frames {
                return Err(Error::Arity { what: "pseudo captions", expected: self.frames, actual: caps.len() });
            }
            r.set_pseudo_captions(caps.clone(), &tok);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CorpusFile {
            frames: self.frames,
            tokens_per_frame: self.tokens_per_frame,
            d_input: self.d_input,
            tokenizer: self.tokenizer,
            records: self
                .records
                .iter()
                .map(|r| RecordFile {
                    video_id: r.video_id.clone(),
                    frames: r.frames.data().to_vec(),
                    caption: r.caption.clone(),
                    pseudo_captions: r.pseudo_captions.clone(),
                    text_latent: r.text_latent.clone(),
                    video_latent: r.video_latent.clone(),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let file: CorpusFile = serde_json::from_slice(&bytes)?;
        let shape = [file.frames, file.tokens_per_frame, file.d_input];
        let records = file
            .records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let frames = Tensor::new(shape, r.frames).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!("record {i} ({:?}): {e}", r.video_id),
                })?;
                let mut rec = VideoRecord {
                    caption_tokens: file.tokenizer.encode(&r.caption),
                    video_id: r.video_id,
                    frames,
                    caption: r.caption,
                    pseudo_captions: None,
                    pseudo_tokens: None,
                    text_latent: r.text_latent,
                    video_latent: r.video_latent,
                };
                if let Some(p) = r.pseudo_captions {
                    rec.set_pseudo_captions(p, &file.tokenizer);
                }
                Ok(rec)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            frames: file.frames,
            tokens_per_frame: file.tokens_per_frame,
            d_input: file.d_input,
            tokenizer: file.tokenizer,
            records,
        })
    }
}
