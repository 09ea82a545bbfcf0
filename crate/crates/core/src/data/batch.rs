use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Records stacked for one step; sample `i`'s caption matches sample `i`'s video.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Corpus positions of the samples.
    pub indices: Vec<usize>,
    /// `[B, F, N+1, d_input]`
    pub frames: Tensor,
    pub captions: Vec<Vec<u32>>,
    /// `B*F` captions, frame-major within each sample. `None` when any record lacks them.
    pub pseudo_captions: Option<Vec<Vec<u32>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn assemble(corpus: &Corpus, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch with no samples".into()));
        }
        let per = corpus.frames * corpus.tokens_per_frame * corpus.d_input;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut captions = Vec::with_capacity(indices.len());
        let mut pseudo = Some(Vec::with_capacity(indices.len() * corpus.frames));
        for &i in indices {
            let r = corpus
                .records
                .get(i)
                .ok_or_else(|| Error::Shape(format!("record {i} outside corpus of {}", corpus.len())))?;
            data.extend_from_slice(r.frames.data());
            captions.push(r.caption_tokens.clone());
            match (&mut pseudo, &r.pseudo_tokens) {
                (Some(p), Some(t)) => p.extend(t.iter().cloned()),
                _ => pseudo = None,
            }
        }
        let frames = Tensor::new([indices.len(), corpus.frames, corpus.tokens_per_frame, corpus.d_input], data)?;
        Ok(Self { indices: indices.to_vec(), frames, captions, pseudo_captions: pseudo })
    }
}

/// Seeded per-epoch shuffling into batches of `batch_size`.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl Batcher {
    pub fn new(corpus_len: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {batch_size}")));
        }
        if batch_size > corpus_len {
            return Err(Error::Config(format!("batch size {batch_size} exceeds corpus size {corpus_len}")));
        }
        Ok(Self { len: corpus_len, batch_size, seed, drop_last })
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.len / self.batch_size
        } else {
            self.len.div_ceil(self.batch_size)
        }
    }

    /// Corpus positions of every batch in `epoch`.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn epoch<'a>(&self, corpus: &'a Corpus, epoch: usize) -> impl Iterator<Item = Result<Batch>> + 'a {
        self.epoch_indices(epoch).into_iter().map(move |idx| Batch::assemble(corpus, &idx))
    }
}
