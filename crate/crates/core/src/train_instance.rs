//! Stage-2 training: proposals regenerated once per epoch from the (frozen
//! by default) snippet network, then the score and regression heads are
//! optimized against reliable-proposal targets.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Tape, Var};
use crate::data::{Config, Corpus, Proposal, TrainVideo};
use crate::error::{Error, Result};
use crate::instance::{
    bind_instance_heads, loss_reg, loss_score, score_samples, InstanceHeads, ScoreSample,
};
use crate::memory::PrototypeMemory;
use crate::model::{snippet_outputs, SnippetNet};
use crate::proposals::{candidate_proposals, rank_proposals, video_level_classes};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_score: f64,
    pub loss_reg: f64,
    pub n_rp: usize,
    pub n_pp: usize,
    pub n_np: usize,
}

/// Per-video material for one stage-2 epoch.
struct VideoProposals {
    /// Feature matrix the heads read (the refined stage-1 features).
    features: crate::autograd::Matrix,
    rp: Vec<Proposal>,
    pp: Vec<Proposal>,
    np: Vec<Proposal>,
    samples: Vec<ScoreSample>,
}

pub struct InstanceTrainer<'a> {
    videos: Vec<TrainVideo<'a>>,
    config: Config,
    pub snippet_net: SnippetNet,
    pub memory: PrototypeMemory,
    pub heads: InstanceHeads,
    opt: Adam,
    shuffle_rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl<'a> InstanceTrainer<'a> {
    pub fn new(
        corpus: &'a Corpus,
        snippet_net: SnippetNet,
        memory: PrototypeMemory,
        config: &Config,
    ) -> Result<Self> {
        config.validate()?;
        let heads = InstanceHeads::new(config.seed.wrapping_add(1), corpus.feature_dim());
        Ok(InstanceTrainer {
            videos: corpus.videos.iter().map(|v| v.train_view()).collect(),
            config: config.clone(),
            snippet_net,
            memory,
            heads,
            opt: Adam::new(config.lr, config.weight_decay),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x1A57)),
            epoch: 0,
            step: 0,
        })
    }

    /// Ranked proposals for every video from the current snippet network.
    /// Candidates are generated for the predicted video-level classes plus
    /// the annotated point classes, so reliable proposals exist even when a
    /// video-level prediction misses.
    fn regenerate(&self) -> Result<Vec<VideoProposals>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(self.videos.len());
        for video in &self.videos {
            let outs = snippet_outputs(
                &self.snippet_net,
                video.features,
                self.memory.prototypes(),
                cfg.enable_rab,
            );
            let mut classes = video_level_classes(&outs.fused, cfg.video_cls_threshold);
            for p in video.points {
                if !classes.contains(&p.label) {
                    classes.push(p.label);
                }
            }
            classes.sort_unstable();
            let mut candidates = Vec::new();
            for &c in &classes {
                let seq: Vec<f64> = outs.fused.column(c).to_vec();
                candidates.extend(candidate_proposals(&seq, &cfg.theta_p, c, cfg.epsilon)?);
            }
            let ranked = rank_proposals(
                candidates,
                video.points,
                &outs.attention,
                &cfg.theta_a,
                cfg.epsilon,
            );
            let samples = score_samples(
                &ranked.pp,
                &ranked.np,
                &ranked.rp,
                &classes,
                cfg.enable_rp_matching,
                cfg.enable_np,
            );
            out.push(VideoProposals {
                features: outs.x_rab,
                rp: ranked.rp,
                pp: ranked.pp,
                np: ranked.np,
                samples,
            });
        }
        Ok(out)
    }

    pub fn run_epoch(&mut self) -> Result<InstanceEpochStats> {
        let cfg = self.config.clone();
        let per_video = self.regenerate()?;
        let total_rp: usize = per_video.iter().map(|v| v.rp.len()).sum();
        if total_rp == 0 {
            return Err(Error::NoReliableProposals);
        }

        let mut order: Vec<usize> = (0..per_video.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut sum_loss = 0.0;
        let mut sum_score = 0.0;
        let mut sum_reg = 0.0;
        let mut n_batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let bound = bind_instance_heads(&tape, &self.heads);
            let mut batch_loss: Option<Var<'_>> = None;
            let mut batch_score = 0.0;
            let mut batch_reg = 0.0;

            for &vi in batch {
                let vp = &per_video[vi];
                let x = tape.leaf(vp.features.clone());
                let ls = if cfg.enable_score {
                    loss_score(&tape, x, &bound, &vp.samples, cfg.epsilon)?
                } else {
                    tape.scalar(0.0)
                };
                let lr = if cfg.enable_reg {
                    loss_reg(
                        &tape,
                        x,
                        &bound,
                        &vp.pp,
                        &vp.rp,
                        cfg.epsilon,
                        cfg.enable_rp_matching,
                    )?
                } else {
                    tape.scalar(0.0)
                };
                batch_score += ls.scalar_value();
                batch_reg += lr.scalar_value();
                let video_loss = ls.add(lr.mul_scalar(cfg.lambda2));
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(video_loss),
                    None => video_loss,
                });
            }

            let loss = batch_loss
                .expect("non-empty batch")
                .mul_scalar(1.0 / batch.len() as f64);
            let loss_value = loss.scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    stage: "instance",
                    step: self.step,
                });
            }
            let grads = tape.backward(loss);
            let grad_list: Vec<_> = bound.param_vars.iter().map(|v| grads.wrt(*v)).collect();
            let mut params = self.heads.tensors_mut();
            self.opt.step(&mut params, &grad_list);
            self.step += 1;

            sum_loss += loss_value;
            sum_score += batch_score / batch.len() as f64;
            sum_reg += batch_reg / batch.len() as f64;
            n_batches += 1;
        }

        self.epoch += 1;
        Ok(InstanceEpochStats {
            epoch: self.epoch,
            loss: sum_loss / n_batches as f64,
            loss_score: sum_score / n_batches as f64,
            loss_reg: sum_reg / n_batches as f64,
            n_rp: total_rp,
            n_pp: per_video.iter().map(|v| v.pp.len()).sum(),
            n_np: per_video.iter().map(|v| v.np.len()).sum(),
        })
    }

    /// Score-head ordering diagnostic: mean predicted completeness over
    /// positive proposals with target above `hi` minus the mean over those
    /// below `lo`. Returns `None` when either side is empty.
    pub fn completeness_separation(&self, lo: f64, hi: f64) -> Result<Option<(f64, f64)>> {
        let per_video = self.regenerate()?;
        let mut good = Vec::new();
        let mut bad = Vec::new();
        for vp in &per_video {
            for pp in &vp.pp {
                let g = crate::instance::match_to_rp(pp, &vp.rp);
                let pred = crate::instance::completeness_value(
                    &vp.features,
                    &self.heads,
                    pp.start,
                    pp.end,
                    self.config.epsilon,
                )?;
                if g > hi {
                    good.push(pred);
                } else if g < lo {
                    bad.push(pred);
                }
            }
        }
        if good.is_empty() || bad.is_empty() {
            return Ok(None);
        }
        Ok(Some((
            good.iter().sum::<f64>() / good.len() as f64,
            bad.iter().sum::<f64>() / bad.len() as f64,
        )))
    }
}

/// Runs the configured number of stage-2 epochs and marks which heads were
/// trained.
pub fn train_instance_stage(
    corpus: &Corpus,
    snippet_net: SnippetNet,
    memory: PrototypeMemory,
    config: &Config,
) -> Result<(InstanceHeads, Vec<InstanceEpochStats>)> {
    let mut trainer = InstanceTrainer::new(corpus, snippet_net, memory, config)?;
    let mut stats = Vec::with_capacity(config.epochs_instance);
    for _ in 0..config.epochs_instance {
        stats.push(trainer.run_epoch()?);
    }
    trainer.heads.score_trained = config.enable_score;
    trainer.heads.reg_trained = config.enable_reg;
    Ok((trainer.heads, stats))
}
