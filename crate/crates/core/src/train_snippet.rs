//! Stage-1 training: online pseudo-snippet mining, focal + contrastive
//! objective, momentum memory refresh.
//!
//! Each batch runs on one tape: forward every video against a prototype
//! snapshot taken at batch start, mine pseudo snippets from the current
//! attention, average the per-video losses, backprop, step the optimizer,
//! and only then feed the mined action-snippet features into the memory.
//! The annotated point snippets are always included in the mined action set;
//! expansion beyond them is gated by `theta1`.

use ndarray::ArrayView1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Tape, Var};
use crate::data::{Config, Corpus, TrainVideo};
use crate::error::{Error, Result};
use crate::losses::{loss_base, loss_contra, loss_video};
use crate::memory::PrototypeMemory;
use crate::mining::generate_pseudo_snippets;
use crate::model::{bind_snippet_net, snippet_forward, SnippetNet};

/// Per-epoch training metrics, one line of the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnippetEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_base: f64,
    pub loss_contra: f64,
    pub n_action_snippets: usize,
    pub n_background_snippets: usize,
}

/// Owns stage-1 state; drive it epoch by epoch or via [`train_snippet_stage`].
pub struct SnippetTrainer<'a> {
    videos: Vec<TrainVideo<'a>>,
    config: Config,
    pub net: SnippetNet,
    pub memory: PrototypeMemory,
    opt: Adam,
    shuffle_rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl<'a> SnippetTrainer<'a> {
    pub fn new(corpus: &'a Corpus, config: &Config) -> Result<Self> {
        config.validate()?;
        if corpus.videos.is_empty() {
            return Err(Error::Config("empty corpus".into()));
        }
        let videos: Vec<TrainVideo<'a>> =
            corpus.videos.iter().map(|v| v.train_view()).collect();
        let memory = PrototypeMemory::init(
            videos.iter().copied(),
            corpus.num_classes,
            config.mu,
            |f| f.clone(),
        )?;
        let d = corpus.feature_dim();
        let net = SnippetNet::new(config.seed, d, corpus.num_classes, config.n_rab);
        Ok(SnippetTrainer {
            videos,
            config: config.clone(),
            net,
            memory,
            opt: Adam::new(config.lr, config.weight_decay),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED)),
            epoch: 0,
            step: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the corpus. Mining always sees the attention from the
    /// current forward pass.
    pub fn run_epoch(&mut self) -> Result<SnippetEpochStats> {
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut sum_loss = 0.0;
        let mut sum_base = 0.0;
        let mut sum_contra = 0.0;
        let mut n_act = 0usize;
        let mut n_bkg = 0usize;
        let mut n_batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = bind_snippet_net(&tape, &self.net);
            let proto_snapshot = self.memory.prototypes().clone();
            let protos = tape.leaf(proto_snapshot.clone());

            let mut batch_loss: Option<Var<'_>> = None;
            let mut batch_base = 0.0;
            let mut batch_contra = 0.0;
            let mut pending_updates: Vec<(usize, Vec<f64>)> = Vec::new();

            for &vi in batch {
                let video = self.videos[vi];
                let x = tape.leaf(video.features.clone());
                let fwd = snippet_forward(&bound, x, protos, cfg.enable_rab);
                let attention: Vec<f64> = fwd.attention.value().column(0).to_vec();
                let ps = generate_pseudo_snippets(
                    &attention,
                    video.points,
                    cfg.theta1,
                    cfg.theta2,
                )
                .seeded_with_points(video.points);
                n_act += ps.n_act();
                n_bkg += ps.n_bkg();

                let lb = loss_base(&tape, fwd.fused, fwd.attention, &ps, cfg.focal_gamma);
                // Without the attention blocks there is no learnable tensor
                // upstream of the raw features, so the contrastive term
                // operates on the embedding output instead.
                let contra_input = if cfg.enable_rab { fwd.x_rab } else { fwd.x_embed };
                let lc = if cfg.enable_contra {
                    loss_contra(
                        &tape,
                        contra_input,
                        &proto_snapshot,
                        &ps,
                        cfg.tau,
                        cfg.contra_split_logs,
                    )
                } else {
                    tape.scalar(0.0)
                };
                let mut present: Vec<usize> = video.points.iter().map(|p| p.label).collect();
                present.sort_unstable();
                present.dedup();
                let lv = loss_video(&tape, fwd.fused, &present);
                batch_base += lb.scalar_value();
                batch_contra += lc.scalar_value();
                let video_loss = lb
                    .add(lc.mul_scalar(cfg.lambda1))
                    .add(lv.mul_scalar(cfg.lambda_video));
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(video_loss),
                    None => video_loss,
                });

                for &(t, c) in &ps.action {
                    pending_updates.push((c, video.features.row(t).to_vec()));
                }
            }

            let loss = batch_loss
                .expect("non-empty batch")
                .mul_scalar(1.0 / batch.len() as f64);
            let loss_value = loss.scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    stage: "snippet",
                    step: self.step,
                });
            }
            let grads = tape.backward(loss);
            let grad_list: Vec<_> = bound.param_vars.iter().map(|v| grads.wrt(*v)).collect();
            let mut params = self.net.tensors_mut();
            self.opt.step(&mut params, &grad_list);
            self.step += 1;

            // EMA refresh strictly after the optimizer step.
            for (c, x) in pending_updates {
                self.memory.update(c, ArrayView1::from(&x))?;
            }

            sum_loss += loss_value;
            sum_base += batch_base / batch.len() as f64;
            sum_contra += batch_contra / batch.len() as f64;
            n_batches += 1;
        }

        self.epoch += 1;
        Ok(SnippetEpochStats {
            epoch: self.epoch,
            loss: sum_loss / n_batches as f64,
            loss_base: sum_base / n_batches as f64,
            loss_contra: sum_contra / n_batches as f64,
            n_action_snippets: n_act,
            n_background_snippets: n_bkg,
        })
    }
}

/// Runs the configured number of stage-1 epochs.
pub fn train_snippet_stage(
    corpus: &Corpus,
    config: &Config,
) -> Result<(SnippetNet, PrototypeMemory, Vec<SnippetEpochStats>)> {
    let mut trainer = SnippetTrainer::new(corpus, config)?;
    let mut stats = Vec::with_capacity(config.epochs_snippet);
    for _ in 0..config.epochs_snippet {
        stats.push(trainer.run_epoch()?);
    }
    Ok((trainer.net, trainer.memory, stats))
}
