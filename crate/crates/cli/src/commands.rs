use anyhow::{anyhow, bail, Context, Result};
use captioner_core::decode::{self, metrics, DecodeOptions, LengthNorm};
use captioner_core::frontend;
use captioner_core::model::{CaptionerModel, PatchoutMode};
use captioner_core::optim::Adam;
use captioner_core::pipeline::prepare::{
    load_tagger_params, prepare as run_prepare, save_tagger, tagger_dims, PrepareOptions,
};
use captioner_core::pipeline::schedule::{
    label_token_table, LoadedDataset, TrainOptions, TrainSchedule, TrainSession,
};
use captioner_core::pipeline::{
    self, load_checkpoint, save_checkpoint, save_mel, CheckpointConfig, DatasetManifest,
    RunConfig, Vocabulary,
};
use captioner_core::textguide::{self, DeskTagger, LabelVocabulary};
use captioner_core::{rng_from_seed, Tape};
use std::path::Path;

pub fn featurize(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let clip = frontend::read_wav(input)?;
    let mel = frontend::extract_mel::<f32>(&clip, &cfg.frontend)?;
    save_mel(out, &mel)?;
    println!(
        "featurized {} ({:.2}s) -> {} [{} mels x {} frames]",
        input.display(),
        clip.duration_secs(),
        out.display(),
        mel.mel_bins(),
        mel.frames()
    );
    Ok(())
}

pub fn pair_labels(captions: &Path, labels: &Path, out: &Path) -> Result<()> {
    let caps = textguide::read_embedding_file(captions)?;
    let labs = textguide::read_embedding_file(labels)?;
    let pairs = textguide::pair_labels(&caps, &labs)?;
    let mut text = String::new();
    for (ci, li, cos) in &pairs {
        text.push_str(&format!("{ci}\t{li}\t{cos:.6}\n"));
    }
    std::fs::write(out, text)?;
    println!("paired {} captions against {} labels -> {}", caps.len(), labs.len(), out.display());
    Ok(())
}

pub fn prepare(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| anyhow!("config needs data.train_manifest"))?;
    let labels_path =
        cfg.labels_file.as_ref().ok_or_else(|| anyhow!("config needs data.labels"))?;
    let caps_path = cfg
        .caption_embeddings
        .as_ref()
        .ok_or_else(|| anyhow!("config needs data.caption_embeddings"))?;
    let labs_path = cfg
        .label_embeddings
        .as_ref()
        .ok_or_else(|| anyhow!("config needs data.label_embeddings"))?;

    let mut manifests = vec![DatasetManifest::read(train_path)?];
    let mut names = vec!["train.jsonl"];
    if let Some(p) = &cfg.pretrain_manifest {
        manifests.push(DatasetManifest::read(p)?);
        names.push("pretrain.jsonl");
    }
    if let Some(p) = &cfg.val_manifest {
        manifests.push(DatasetManifest::read(p)?);
        names.push("val.jsonl");
    }
    let labels = LabelVocabulary::from_lines(
        &std::fs::read_to_string(labels_path)
            .with_context(|| format!("reading {}", labels_path.display()))?,
    )?;
    let caps = textguide::read_embedding_file(caps_path)?;
    let labs = textguide::read_embedding_file(labs_path)?;

    let opts = PrepareOptions {
        tagger_dim: cfg.tagger_dim,
        tagger_epochs: cfg.tagger_epochs,
        tagger_lr: cfg.tagger_lr,
        seed: cfg.seed,
    };
    let (prepared, tape, tagger) =
        run_prepare::<f32>(&manifests, &labels, &caps, &labs, &cfg.frontend, &opts)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    // Prepared manifests carry absolute clip paths so they relocate freely.
    for (m, name) in prepared.manifests.iter().zip(&names) {
        let mut abs = m.clone();
        for e in &mut abs.entries {
            let p = std::fs::canonicalize(m.clip_path(e))
                .with_context(|| format!("resolving clip {}", e.clip))?;
            e.clip = p.display().to_string();
        }
        let path = cfg.out_dir.join(name);
        abs.write(&path)?;
        println!("prepared manifest -> {}", path.display());
    }
    std::fs::write(
        cfg.out_dir.join("vocab.json"),
        serde_json::to_vec_pretty(prepared.vocab.words())?,
    )?;
    let tagger_dir = cfg.out_dir.join("tagger");
    save_tagger(&tagger_dir, &tape, tagger.cfg.dim, tagger.n_labels)?;
    println!(
        "vocabulary: {} words; tagger ({} labels) -> {}",
        prepared.vocab.len(),
        tagger.n_labels,
        tagger_dir.display()
    );
    Ok(())
}

pub fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| anyhow!("config needs data.train_manifest"))?;
    let train_manifest = DatasetManifest::read(train_path)?;
    let pretrain_manifest = match &cfg.pretrain_manifest {
        Some(p) => DatasetManifest::read(p)?,
        None => train_manifest.clone(),
    };
    let val_manifest = cfg.val_manifest.as_ref().map(|p| DatasetManifest::read(p)).transpose()?;

    let vocab = Vocabulary::build(train_manifest.all_captions())?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();

    let labels = match (&cfg.labels_file, cfg.guide_enabled) {
        (Some(p), true) => Some(LabelVocabulary::from_lines(&std::fs::read_to_string(p)?)?),
        (None, true) => bail!("guiding text enabled but data.labels is missing"),
        _ => None,
    };

    println!("loading datasets ({} train clips)...", train_manifest.len());
    let train_data = LoadedDataset::<f32>::load(&train_manifest, &vocab, &cfg.frontend)?;
    let pretrain_data = LoadedDataset::<f32>::load(&pretrain_manifest, &vocab, &cfg.frontend)?;
    let val_data = val_manifest
        .as_ref()
        .map(|m| LoadedDataset::<f32>::load(m, &vocab, &cfg.frontend))
        .transpose()?;

    let f_max = cfg
        .patch
        .grid_extent(cfg.frontend.n_mels)
        .ok_or_else(|| anyhow!("mel bins smaller than the patch kernel"))?;
    let t_max = cfg
        .patch
        .grid_extent(cfg.frontend.max_frames())
        .ok_or_else(|| anyhow!("max clip length shorter than the patch kernel"))?;

    let mut tape = Tape::<f32>::new();
    let mut rng = rng_from_seed(cfg.seed);
    let model =
        CaptionerModel::init(&mut tape, model_cfg.clone(), cfg.patch.clone(), f_max, t_max, &mut rng)?;
    let tagger_cfg = match (&cfg.tagger_store, cfg.guide_enabled) {
        (Some(store), true) => {
            let (dim, n_labels) = tagger_dims(store)?;
            let _tagger = DeskTagger::init(&mut tape, dim, n_labels, &mut rng)?;
            Some((store.clone(), dim, n_labels))
        }
        _ => None,
    };
    tape.commit_params();
    if let Some((store, _, _)) = &tagger_cfg {
        load_tagger_params(store, &mut tape)?;
    }
    if let Some(path) = &cfg.word_embeddings {
        let entries = textguide::read_embedding_file(path)?;
        let loaded = model.load_word_embeddings(&mut tape, &entries, &vocab)?;
        println!("initialized {loaded} decoder word embeddings from {}", path.display());
    }

    let label_tokens = labels.as_ref().map(|l| label_token_table(l, &vocab)).transpose()?;
    let mut optimizer = Adam::new(cfg.stage1.lr);
    optimizer.attach(&tape);
    let options = TrainOptions::from_run_config(&cfg);
    let schedule = TrainSchedule::from_run_config(&cfg);
    let mut session =
        TrainSession::new(&mut tape, &model, &mut optimizer, options, label_tokens, cfg.seed)?;

    let ckpt_cfg = CheckpointConfig {
        model: model_cfg,
        patch: cfg.patch.clone(),
        frontend: cfg.frontend.clone(),
        guide_enabled: cfg.guide_enabled,
        guide_count: cfg.guide_count,
        guide_top_p: cfg.guide_top_p,
        f_max,
        t_max,
        tagger: tagger_cfg
            .as_ref()
            .map(|(_, dim, n)| pipeline::checkpoint::TaggerConfig { dim: *dim, n_labels: *n }),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out_dir = cfg.out_dir.clone();
    let vocab_ref = &vocab;
    let labels_ref = labels.as_ref();
    let ckpt_ref = &ckpt_cfg;
    let report = session.run_schedule(
        &schedule,
        &pretrain_data,
        &train_data,
        val_data.as_ref(),
        |si, stage, tape, report| {
            let dir = out_dir.join(format!("stage{}_{}", si + 1, stage.name));
            save_checkpoint(&dir, tape, ckpt_ref, vocab_ref, labels_ref)?;
            std::fs::write(out_dir.join("train_log.tsv"), report.to_log_lines())?;
            let losses = report.losses_for(stage.name);
            println!(
                "stage {} done ({} epochs, loss {:.4} -> {:.4}) checkpoint {}",
                stage.name,
                losses.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                dir.display()
            );
            Ok(())
        },
    )?;
    let final_dir = out_dir.join("final");
    save_checkpoint(&final_dir, &tape, &ckpt_cfg, &vocab, labels.as_ref())?;
    std::fs::write(out_dir.join("train_log.tsv"), report.to_log_lines())?;
    println!("final checkpoint -> {}", final_dir.display());
    Ok(())
}

pub fn infer(ckpt: &Path, input: &Path, beam: usize, greedy: bool) -> Result<()> {
    let mut loaded = load_checkpoint::<f32>(ckpt)?;
    let clip = frontend::read_wav(input)?;
    let mel = frontend::extract_mel::<f32>(&clip, &loaded.config.frontend)?;
    let std = frontend::standardize(&mel);

    let guide = if loaded.config.guide_enabled {
        let tagger = loaded
            .tagger
            .as_ref()
            .ok_or_else(|| anyhow!("checkpoint has no tagger but guiding text is enabled"))?;
        let labels = loaded
            .labels
            .as_ref()
            .ok_or_else(|| anyhow!("checkpoint has no label set but guiding text is enabled"))?;
        use captioner_core::textguide::Tagger as _;
        let dist = tagger.tag(&mut loaded.tape, &std)?;
        let picked = textguide::top_k_labels(&dist, loaded.config.guide_count)?;
        let names: Vec<&str> = picked.iter().map(|&i| labels.name(i)).collect();
        println!("guiding text: {}", names.join(" / "));
        Some(textguide::guiding_token_ids(&picked, labels, &loaded.vocab)?)
    } else {
        None
    };

    let mut rng = rng_from_seed(0);
    let enc = loaded.model.encode(
        &mut loaded.tape,
        &std,
        guide.as_ref(),
        PatchoutMode::Eval,
        &mut rng,
    )?;
    let max_len = loaded.config.model.max_caption_len;
    let tokens = if greedy {
        decode::greedy_decode(&mut loaded.tape, &loaded.model, enc.memory, max_len)?
    } else {
        let opts = DecodeOptions { width: beam.max(1), max_len, len_norm: LengthNorm::Mean };
        decode::beam_search(&mut loaded.tape, &loaded.model, enc.memory, &opts)?
    };
    println!("{}", loaded.vocab.decode(&tokens));
    Ok(())
}

pub fn eval(pred: &Path, refs: &Path, out: &Path) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Pred {
        id: serde_json::Value,
        caption: String,
    }
    #[derive(serde::Deserialize)]
    struct Refs {
        id: serde_json::Value,
        captions: Vec<String>,
    }
    let parse_lines = |path: &Path| -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    };
    let mut references = std::collections::HashMap::new();
    for line in parse_lines(refs)? {
        let r: Refs = serde_json::from_str(&line).with_context(|| format!("refs line {line:?}"))?;
        references.insert(r.id.to_string(), r.captions);
    }
    let mut items = Vec::new();
    for line in parse_lines(pred)? {
        let p: Pred = serde_json::from_str(&line).with_context(|| format!("pred line {line:?}"))?;
        let refs = references
            .get(&p.id.to_string())
            .ok_or_else(|| anyhow!("no references for id {}", p.id))?;
        let cand = pipeline::tokenize(&p.caption).unwrap_or_default();
        let ref_tokens: Vec<Vec<String>> = refs
            .iter()
            .map(|r| pipeline::tokenize(r))
            .collect::<captioner_core::Result<_>>()?;
        items.push((cand, ref_tokens));
    }
    let report = metrics::evaluate_corpus(&items)?;
    println!("{report}");
    std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn synth_corpus(n: usize, out: &Path, seed: u64, val: usize, captions_per_clip: usize) -> Result<()> {
    use captioner_core::pipeline::synth::{generate, SynthOptions};
    let corpus = generate(
        out,
        &SynthOptions { n_clips: n, val_clips: val, captions_per_clip, seed, ..Default::default() },
    )?;
    println!("train manifest: {}", corpus.train_manifest.display());
    if let Some(v) = &corpus.val_manifest {
        println!("val manifest:   {}", v.display());
    }
    println!("labels:         {}", corpus.labels_file.display());
    println!("embeddings:     {} / {}", corpus.caption_embeddings.display(), corpus.label_embeddings.display());
    Ok(())
}
