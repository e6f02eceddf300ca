//! The two-stage pre-train + warmup fine-tune schedule and the training loop.

use crate::augment::{self, MixupConfig, MixupLoss, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, MelSpectrogram};
use crate::model::{CaptionerModel, PatchoutMode};
use crate::optim::Adam;
use crate::pipeline::config::RunConfig;
use crate::pipeline::manifest::DatasetManifest;
use crate::pipeline::vocab::{Vocabulary, PAD_ID};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::textguide::{self, GuidingText, LabelVocabulary, TagDistribution};

/// One clip, featurized once and kept in memory.
pub struct LoadedClip<F: Real> {
    pub mel: MelSpectrogram<F>,
    /// Encoded captions, `<SOS> … <EOS>`, unpadded.
    pub captions: Vec<Vec<usize>>,
    pub caption_texts: Vec<String>,
    pub guide_probs: Option<TagDistribution>,
    pub guide_labels: Option<Vec<usize>>,
}

pub struct LoadedDataset<F: Real> {
    pub clips: Vec<LoadedClip<F>>,
}

impl<F: Real> LoadedDataset<F> {
    /// Featurize every manifest clip up front; fails fast on the first
    /// unreadable path.
    pub fn load(manifest: &DatasetManifest, vocab: &Vocabulary, fcfg: &FrontendConfig) -> Result<Self> {
        manifest.check_clips()?;
        let mut clips = Vec::with_capacity(manifest.len());
        for entry in &manifest.entries {
            let path = manifest.clip_path(entry);
            let audio = frontend::read_wav(&path)?;
            let mel = frontend::extract_mel::<F>(&audio, fcfg)?;
            let mut captions = Vec::with_capacity(entry.captions.len());
            for c in &entry.captions {
                captions.push(vocab.encode(c)?);
            }
            clips.push(LoadedClip {
                mel,
                captions,
                caption_texts: entry.captions.clone(),
                guide_probs: entry
                    .guide_probs
                    .as_ref()
                    .map(|p| TagDistribution { probs: p.clone() }),
                guide_labels: entry.guide_labels.clone(),
            });
        }
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Learning-rate policy of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    Constant(f64),
    LinearWarmup { start: f64, end: f64 },
}

/// Closed form of the warmup: lr(s) = start + (end-start)·s/total.
pub fn warmup_lr(start: f64, end: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return end;
    }
    start + (end - start) * step as f64 / total_steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: &'static str,
    pub epochs: usize,
    pub lr: LrPolicy,
    pub p_f: usize,
    pub p_t: usize,
    pub freeze_encoder: bool,
    pub dataset: DatasetRole,
}

/// The three stages: encoder-frozen pre-train, unfrozen pre-train, and the
/// linear-warmup fine-tune, each with its own Patchout amounts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            stages: vec![
                Stage {
                    name: "pretrain_frozen",
                    epochs: cfg.stage1.epochs,
                    lr: LrPolicy::Constant(cfg.stage1.lr),
                    p_f: cfg.stage1.p_f,
                    p_t: cfg.stage1.p_t,
                    freeze_encoder: true,
                    dataset: DatasetRole::Pretrain,
                },
                Stage {
                    name: "pretrain_unfrozen",
                    epochs: cfg.stage2.epochs,
                    lr: LrPolicy::Constant(cfg.stage2.lr),
                    p_f: cfg.stage2.p_f,
                    p_t: cfg.stage2.p_t,
                    freeze_encoder: false,
                    dataset: DatasetRole::Pretrain,
                },
                Stage {
                    name: "finetune",
                    epochs: cfg.stage3.epochs,
                    lr: LrPolicy::LinearWarmup { start: cfg.stage3_lr_start, end: cfg.stage3_lr_end },
                    p_f: cfg.stage3.p_f,
                    p_t: cfg.stage3.p_t,
                    freeze_encoder: false,
                    dataset: DatasetRole::Finetune,
                },
            ],
            batch_size: cfg.batch_size,
        }
    }
}

/// Guiding-text sampling knobs for training.
#[derive(Debug, Clone, Copy)]
pub struct GuideOptions {
    pub count: usize,
    pub top_p: f64,
}

/// Everything the loop needs besides the schedule itself.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mixup: MixupConfig,
    pub specaug: Option<SpecAugmentConfig>,
    pub guide: Option<GuideOptions>,
    pub label_smoothing: f64,
}

impl TrainOptions {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            mixup: cfg.mixup.clone(),
            specaug: cfg.specaug_enabled.then(|| cfg.specaug.clone()),
            guide: cfg.guide_enabled.then_some(GuideOptions {
                count: cfg.guide_count,
                top_p: cfg.guide_top_p,
            }),
            label_smoothing: cfg.model.label_smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub epochs: Vec<EpochLog>,
}

impl RunReport {
    pub fn losses_for(&self, stage: &str) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.stage == stage).map(|e| e.loss).collect()
    }

    pub fn to_log_lines(&self) -> String {
        let mut out = String::from("stage\tepoch\tloss\tlr_first\tlr_last\tval_loss\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.3e}\t{:.3e}\t{}\n",
                e.stage,
                e.epoch,
                e.loss,
                e.lr_first,
                e.lr_last,
                e.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }
}

/// Instrumented view of one Mixup pair inside a training step: the decoder
/// consumed `embedded_mixed` while the loss targeted the unmixed
/// `target_ids`.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub lambda: f64,
    pub embedded_a: Vec<f64>,
    pub embedded_b: Vec<f64>,
    pub embedded_mixed: Vec<f64>,
    pub target_ids: Vec<usize>,
    pub caption_a: Vec<usize>,
    pub caption_b: Vec<usize>,
}

type ParamSnapshot<F> = Vec<(TensorId, Tensor<F>)>;

/// Owns one training run: tape, model, optimizer, options and the RNG.
pub struct TrainSession<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub model: &'a CaptionerModel,
    pub optimizer: &'a mut Adam,
    pub options: TrainOptions,
    pub rng: Rng,
    /// Token ids of each label's words, precomputed from the label and
    /// caption vocabularies. Required when guiding text is enabled.
    label_tokens: Option<Vec<Vec<usize>>>,
    /// Filled by the last instrumented step that mixed a pair.
    pub last_trace: Option<StepTrace>,
    instrument: bool,
}

/// Precompute each label's caption-vocabulary token ids.
pub fn label_token_table(labels: &LabelVocabulary, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    (0..labels.len())
        .map(|i| {
            let guide = textguide::guiding_token_ids(&[i], labels, vocab)?;
            Ok(guide.token_ids)
        })
        .collect()
}

impl<'a, F: Real> TrainSession<'a, F> {
    pub fn new(
        tape: &'a mut Tape<F>,
        model: &'a CaptionerModel,
        optimizer: &'a mut Adam,
        options: TrainOptions,
        label_tokens: Option<Vec<Vec<usize>>>,
        seed: u64,
    ) -> Result<Self> {
        if options.guide.is_some() && label_tokens.is_none() {
            return Err(Error::InvalidConfig(
                "guiding text enabled but no label token table supplied".into(),
            ));
        }
        Ok(Self {
            tape,
            model,
            optimizer,
            options,
            rng: crate::rng::rng_from_seed(seed),
            label_tokens,
            last_trace: None,
            instrument: false,
        })
    }

    /// Record a [`StepTrace`] for the first Mixup pair of every step.
    pub fn instrument(&mut self) {
        self.instrument = true;
    }

    /// Execute the stages in order, logging per-epoch losses. `after_stage`
    /// runs once per finished stage (checkpoint writing lives there).
    pub fn run_schedule(
        &mut self,
        schedule: &TrainSchedule,
        pretrain: &LoadedDataset<F>,
        finetune: &LoadedDataset<F>,
        val: Option<&LoadedDataset<F>>,
        mut after_stage: impl FnMut(usize, &Stage, &mut Tape<F>, &RunReport) -> Result<()>,
    ) -> Result<RunReport> {
        let mut report = RunReport::default();
        for (si, stage) in schedule.stages.iter().enumerate() {
            let data = match stage.dataset {
                DatasetRole::Pretrain => pretrain,
                DatasetRole::Finetune => finetune,
            };
            if data.is_empty() {
                return Err(Error::InvalidInput(format!("stage {} has no data", stage.name)));
            }
            let batches_per_epoch = data.len().div_ceil(schedule.batch_size);
            let total_steps = stage.epochs * batches_per_epoch;
            let mut step = 0usize;
            let mut best: Option<(f64, ParamSnapshot<F>)> = None;
            for epoch in 0..stage.epochs {
                let mut order: Vec<usize> = (0..data.len()).collect();
                use rand::seq::SliceRandom;
                order.shuffle(&mut self.rng);
                let mut epoch_loss = 0.0;
                let mut lr_first = 0.0;
                let mut lr_last = 0.0;
                for (bi, batch) in order.chunks(schedule.batch_size).enumerate() {
                    let lr = match stage.lr {
                        LrPolicy::Constant(c) => c,
                        LrPolicy::LinearWarmup { start, end } => {
                            warmup_lr(start, end, step, total_steps)
                        }
                    };
                    if bi == 0 {
                        lr_first = lr;
                    }
                    lr_last = lr;
                    self.optimizer.lr = lr;
                    epoch_loss += self.train_step(data, batch, stage)?;
                    step += 1;
                }
                epoch_loss /= batches_per_epoch as f64;
                let val_loss = match val {
                    Some(v) if !v.is_empty() => Some(self.eval_loss(v)?),
                    _ => None,
                };
                report.epochs.push(EpochLog {
                    stage: stage.name,
                    epoch,
                    loss: epoch_loss,
                    lr_first,
                    lr_last,
                    val_loss,
                });
                if let Some(vl) = val_loss {
                    if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                        best = Some((vl, self.snapshot_params()));
                    }
                }
            }
            if let Some((_, params)) = best {
                self.restore_params(params);
            }
            after_stage(si, stage, self.tape, &report)?;
        }
        Ok(report)
    }

    /// Freeze or unfreeze the encoder side. Tagger parameters, when present
    /// on the tape, stay frozen throughout, as does the guiding-text table
    /// when text conditioning is off (an unused module must not demand
    /// gradients).
    fn set_frozen(&mut self, freeze_encoder: bool) {
        let enc_ids = self.model.encoder_param_ids();
        for id in enc_ids {
            self.tape.set_requires_grad(id, !freeze_encoder);
        }
        self.tape.set_requires_grad(self.model.guide_embed, self.options.guide.is_some());
        let tagger_ids: Vec<TensorId> = self
            .tape
            .params()
            .iter()
            .filter(|(name, _)| name.starts_with("tagger."))
            .map(|&(_, id)| id)
            .collect();
        for id in tagger_ids {
            self.tape.set_requires_grad(id, false);
        }
    }

    fn snapshot_params(&self) -> ParamSnapshot<F> {
        self.tape
            .params()
            .iter()
            .map(|&(_, id)| (id, self.tape.value(id).clone()))
            .collect()
    }

    fn restore_params(&mut self, params: ParamSnapshot<F>) {
        for (id, value) in params {
            *self.tape.value_mut(id) = value;
        }
    }

    fn guide_from_indices(&self, indices: Vec<usize>) -> Result<GuidingText> {
        let table = self
            .label_tokens
            .as_ref()
            .ok_or_else(|| Error::Contract("guide requested without a label table".into()))?;
        let mut token_ids = Vec::new();
        for &i in &indices {
            let toks = table
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("label index {i} out of range")))?;
            token_ids.extend_from_slice(toks);
        }
        Ok(GuidingText { token_ids, label_indices: indices })
    }

    /// Pick the guiding text for one clip: nucleus-sample `count` labels per
    /// epoch at train time, top-k labels at eval, or the cached fixed
    /// selection when the manifest pinned one.
    fn pick_guide(
        &mut self,
        clip: &LoadedClip<F>,
        opts: &GuideOptions,
        train: bool,
    ) -> Result<GuidingText> {
        if let Some(fixed) = &clip.guide_labels {
            return self.guide_from_indices(fixed.clone());
        }
        let Some(dist) = &clip.guide_probs else {
            return Err(Error::InvalidInput(
                "guiding text enabled but the manifest has no cached tag distribution; run prepare"
                    .into(),
            ));
        };
        let indices = if train {
            (0..opts.count)
                .map(|_| textguide::nucleus_sample(dist, opts.top_p, &mut self.rng))
                .collect::<Result<Vec<usize>>>()?
        } else {
            textguide::top_k_labels(dist, opts.count)?
        };
        self.guide_from_indices(indices)
    }

    /// One optimizer step over a batch of clip indices. Returns the loss.
    pub fn train_step(
        &mut self,
        data: &LoadedDataset<F>,
        batch: &[usize],
        stage: &Stage,
    ) -> Result<f64> {
        use rand::Rng as _;
        self.tape.reset();
        self.set_frozen(stage.freeze_encoder);
        let guide_opts = self.options.guide;
        let do_mixup = self.options.mixup.enabled && batch.len() > 1;

        let caption_choice: Vec<usize> = batch
            .iter()
            .map(|&ci| self.rng.random_range(0..data.clips[ci].captions.len()))
            .collect();
        let mut partner: Vec<usize> = (0..batch.len()).collect();
        if do_mixup {
            use rand::seq::SliceRandom;
            partner.shuffle(&mut self.rng);
        }

        let mut per_sample_losses: Vec<TensorId> = Vec::with_capacity(batch.len());
        let mut first_trace: Option<StepTrace> = None;
        for (slot, &ci) in batch.iter().enumerate() {
            let clip = &data.clips[ci];
            let mel_i = self.prep_mel(clip)?;
            let guide_i = match guide_opts {
                Some(g) => Some(self.pick_guide(clip, &g, true)?),
                None => None,
            };
            let cap_i = clip.captions[caption_choice[slot]].clone();

            let loss = if do_mixup && partner[slot] != slot {
                let cj = batch[partner[slot]];
                let clip_j = &data.clips[cj];
                let mel_j = self.prep_mel(clip_j)?;
                let guide_j = match guide_opts {
                    Some(g) => Some(self.pick_guide(clip_j, &g, true)?),
                    None => None,
                };
                let cap_j = clip_j.captions[caption_choice[partner[slot]]].clone();
                let lambda = augment::sample_lambda(&self.options.mixup, &mut self.rng)?;
                self.mixup_sample_loss(
                    stage,
                    (&mel_i, &cap_i, guide_i.as_ref()),
                    (&mel_j, &cap_j, guide_j.as_ref()),
                    lambda,
                    &mut first_trace,
                )?
            } else {
                self.plain_sample_loss(stage, &mel_i, &cap_i, guide_i.as_ref())?
            };
            per_sample_losses.push(loss);
        }

        let mut acc = per_sample_losses[0];
        for &l in &per_sample_losses[1..] {
            acc = self.tape.add(acc, l)?;
        }
        let loss = self.tape.scale(acc, F::from_f64(1.0 / batch.len() as f64))?;
        let loss_value = self.tape.value(loss).data()[0].as_f64();
        self.tape.backward(loss)?;
        self.optimizer.step(self.tape)?;
        if self.instrument {
            self.last_trace = first_trace;
        }
        Ok(loss_value)
    }

    /// SpecAugment (train only) then per-clip standardization.
    fn prep_mel(&mut self, clip: &LoadedClip<F>) -> Result<MelSpectrogram<F>> {
        let mel = match &self.options.specaug {
            Some(cfg) => augment::spec_augment(&clip.mel, cfg, &mut self.rng)?,
            None => clip.mel.clone(),
        };
        Ok(frontend::standardize(&mel))
    }

    /// Mean CE of one unmixed sample.
    fn plain_sample_loss(
        &mut self,
        stage: &Stage,
        mel: &MelSpectrogram<F>,
        caption: &[usize],
        guide: Option<&GuidingText>,
    ) -> Result<TensorId> {
        let out = self.model.encode(
            self.tape,
            mel,
            guide,
            PatchoutMode::Train { p_f: stage.p_f, p_t: stage.p_t },
            &mut self.rng,
        )?;
        let input_ids = &caption[..caption.len() - 1];
        let logits =
            self.model.decode_tokens(self.tape, input_ids, out.memory, true, &mut self.rng)?;
        let targets: Vec<usize> = caption[1..].to_vec();
        let counted = vec![true; targets.len()];
        let sum = self.tape.ce_sum(
            logits,
            &targets,
            &counted,
            F::from_f64(self.options.label_smoothing),
        )?;
        self.tape.scale(sum, F::from_f64(1.0 / targets.len() as f64))
    }

    /// Mixup sample: mixed spectrogram, mixed caption embeddings and mixed
    /// guiding text through the model; unmixed token targets in the loss.
    fn mixup_sample_loss(
        &mut self,
        stage: &Stage,
        a: (&MelSpectrogram<F>, &Vec<usize>, Option<&GuidingText>),
        b: (&MelSpectrogram<F>, &Vec<usize>, Option<&GuidingText>),
        lambda: f64,
        trace: &mut Option<StepTrace>,
    ) -> Result<TensorId> {
        let (mel_a, cap_a, guide_a) = a;
        let (mel_b, cap_b, guide_b) = b;
        let lam = F::from_f64(lambda);

        // Spectrograms: crop to the common frame count, then lerp.
        let frames = mel_a.frames().min(mel_b.frames());
        let bins = mel_a.mel_bins();
        let crop = |m: &MelSpectrogram<F>| -> MelSpectrogram<F> {
            let mut out = Tensor::zeros(vec![bins, frames]);
            for bb in 0..bins {
                for t in 0..frames {
                    out.data_mut()[bb * frames + t] = m.values.at2(bb, t);
                }
            }
            MelSpectrogram { values: out, frame_hop: m.frame_hop }
        };
        let mel = MelSpectrogram {
            values: crop(mel_a).values.lerp(&crop(mel_b).values, lam)?,
            frame_hop: mel_a.frame_hop,
        };

        // Caption embeddings: pad ids to a common width, embed, lerp.
        let width = cap_a.len().max(cap_b.len());
        let pad_to = |c: &[usize]| -> Vec<usize> {
            let mut v = c.to_vec();
            v.resize(width, PAD_ID);
            v
        };
        let ids_a = pad_to(cap_a);
        let ids_b = pad_to(cap_b);
        let emb_a = self.model.embed_caption(self.tape, &ids_a[..width - 1])?;
        let emb_b = self.model.embed_caption(self.tape, &ids_b[..width - 1])?;
        let emb_mixed = self.tape.lerp(emb_a, emb_b, lam)?;

        // Guiding text: crop the shorter id list's length, embed both, lerp.
        let text = match (guide_a, guide_b) {
            (Some(ga), Some(gb)) => {
                let w = ga.token_ids.len().min(gb.token_ids.len());
                if w == 0 {
                    None
                } else {
                    let ta = self.tape.gather_rows(self.model.guide_embed, &ga.token_ids[..w])?;
                    let tb = self.tape.gather_rows(self.model.guide_embed, &gb.token_ids[..w])?;
                    Some(self.tape.lerp(ta, tb, lam)?)
                }
            }
            _ => None,
        };

        // Encoder over the mixed inputs with this stage's Patchout.
        let f_m = self
            .model
            .patch_cfg
            .grid_extent(bins)
            .ok_or_else(|| Error::InvalidInput("mel smaller than patch kernel".into()))?;
        let t_m = self
            .model
            .patch_cfg
            .grid_extent(frames)
            .ok_or_else(|| Error::InvalidInput("clip shorter than patch kernel".into()))?;
        let (kept_f, kept_t) =
            crate::patchout::sample_kept_indices(f_m, t_m, stage.p_f, stage.p_t, &mut self.rng)?;
        let map = crate::patchout::extract_feature_map(
            self.tape,
            &mel,
            &self.model.patch,
            &self.model.patch_cfg,
        )?;
        let map = crate::patchout::add_positional(self.tape, map, &self.model.pos)?;
        let patches = self.tape.patch_flatten(map.id, &kept_f, &kept_t)?;
        let out = self.model.encode_from_parts(self.tape, patches, text)?;

        let logits =
            self.model.decoder_forward(self.tape, emb_mixed, out.memory, true, &mut self.rng)?;

        // Unmixed targets. Dominant: the λ-heavier caption; both_weighted:
        // λ-weighted sum of both captions' mean CE.
        let smoothing = F::from_f64(self.options.label_smoothing);
        let tape = &mut *self.tape;
        let mut mean_ce = |ids: &[usize]| -> Result<TensorId> {
            let targets: Vec<usize> = ids[1..].to_vec();
            let counted: Vec<bool> = targets.iter().map(|&t| t != PAD_ID).collect();
            let n = counted.iter().filter(|&&c| c).count().max(1);
            let sum = tape.ce_sum(logits, &targets, &counted, smoothing)?;
            tape.scale(sum, F::from_f64(1.0 / n as f64))
        };
        let loss = match self.options.mixup.loss {
            MixupLoss::Dominant => {
                let ids = if lambda >= 0.5 { &ids_a } else { &ids_b };
                mean_ce(ids)?
            }
            MixupLoss::BothWeighted => {
                let la = mean_ce(&ids_a)?;
                let lb = mean_ce(&ids_b)?;
                self.tape.lerp(la, lb, lam)?
            }
        };

        if self.instrument && trace.is_none() {
            let dom = if lambda >= 0.5 { &ids_a } else { &ids_b };
            let dump = |id: TensorId, tape: &Tape<F>| -> Vec<f64> {
                tape.value(id).data().iter().map(|v| v.as_f64()).collect()
            };
            *trace = Some(StepTrace {
                lambda,
                embedded_a: dump(emb_a, self.tape),
                embedded_b: dump(emb_b, self.tape),
                embedded_mixed: dump(emb_mixed, self.tape),
                target_ids: dom[1..].to_vec(),
                caption_a: cap_a.clone(),
                caption_b: cap_b.clone(),
            });
        }
        Ok(loss)
    }

    /// Teacher-forced eval-mode loss (no Patchout, no dropout, no Mixup),
    /// first caption of every clip.
    pub fn eval_loss(&mut self, data: &LoadedDataset<F>) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for clip in &data.clips {
            self.tape.reset();
            let mel = frontend::standardize(&clip.mel);
            let guide = match self.options.guide {
                Some(g) => Some(self.pick_guide(clip, &g, false)?),
                None => None,
            };
            let out = self.model.encode(
                self.tape,
                &mel,
                guide.as_ref(),
                PatchoutMode::Eval,
                &mut self.rng,
            )?;
            let caption = &clip.captions[0];
            let logits = self.model.decode_tokens(
                self.tape,
                &caption[..caption.len() - 1],
                out.memory,
                false,
                &mut self.rng,
            )?;
            let targets: Vec<usize> = caption[1..].to_vec();
            let counted = vec![true; targets.len()];
            let sum = self.tape.ce_sum(logits, &targets, &counted, F::zero())?;
            total += self.tape.value(sum).data()[0].as_f64();
            count += targets.len();
        }
        self.tape.reset();
        Ok(total / count.max(1) as f64)
    }

    /// Greedy caption for every clip in eval mode (guide via top-k labels).
    pub fn greedy_captions(&mut self, data: &LoadedDataset<F>) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(data.len());
        for clip in &data.clips {
            self.tape.reset();
            let mel = frontend::standardize(&clip.mel);
            let guide = match self.options.guide {
                Some(g) => Some(self.pick_guide(clip, &g, false)?),
                None => None,
            };
            let enc = self.model.encode(
                self.tape,
                &mel,
                guide.as_ref(),
                PatchoutMode::Eval,
                &mut self.rng,
            )?;
            let tokens = crate::decode::greedy_decode(
                self.tape,
                self.model,
                enc.memory,
                self.model.cfg.max_caption_len,
            )?;
            out.push(tokens);
        }
        self.tape.reset();
        Ok(out)
    }
}
