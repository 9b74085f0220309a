//! Prompt rendering and answer parsing.
//!
//! A prompt instance renders to a hybrid token sequence: vocabulary tokens
//! for the template and item text, plus injected positions (soft separator,
//! fused multimodal token, or per-modality feature tokens) depending on the
//! mode. Every position carries a provenance tag so trainers can scan
//! batches and route gradients.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{PromptInstance, World};
use crate::error::{Error, Result};
use crate::features::{Modality, ModalityTables};
use crate::fusion::{
    fuse_forward, project_single_forward, FuseCache, FusionInputs, FusionParams, SingleCache,
};
use crate::linalg::Mat;
use crate::tinylm::{letter_id, BaseLm, SoftSeparator, Vocabulary, BOS_ID, EOS_ID};

pub const TEMPLATE_VERSION: &str = "v1";
pub const TEMPLATE_SKELETON: &str = include_str!("../assets/template_v1.txt");
pub const INSTRUCTION: &str = "complete the bundle . choose the candidate that best completes \
                               the seed items . respond with the letter of the correct option .";
pub const ANSWER_CUE: &str = "answer :";
pub const TEXTUAL_SEPARATOR: &str = "content token :";

pub fn modality_indicator(m: Modality) -> &'static str {
    match m {
        Modality::Media => "media token :",
        Modality::UserLevel => "user token :",
        Modality::BundleLevel => "bundle token :",
    }
}

/// The strings that shape rendered prompts; the template hash covers
/// exactly these.
pub fn template_words() -> Vec<&'static str> {
    vec![
        TEMPLATE_SKELETON,
        INSTRUCTION,
        ANSWER_CUE,
        TEXTUAL_SEPARATOR,
        modality_indicator(Modality::Media),
        modality_indicator(Modality::UserLevel),
        modality_indicator(Modality::BundleLevel),
    ]
}

/// Reserved words for vocabulary builds: the template strings plus the
/// generator's closed word pools, so prompts over any world built from the
/// same pools never tokenize to UNK.
pub fn vocab_reserved_words() -> Vec<&'static str> {
    let mut words = template_words();
    words.extend(crate::dataset::WORD_POOLS.all_words());
    words
}

/// Hash over every string that shapes the rendered prompt. Stored in run
/// metadata; results are only comparable across equal hashes.
pub fn template_hash() -> String {
    let mut h = Sha256::new();
    for part in template_words() {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    let mut out = String::new();
    for b in h.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    TextOnly,
    Fusion,
    PromptStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separator {
    Textual,
    None,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub media: bool,
    pub ui: bool,
    pub bi: bool,
}

impl ModalityMask {
    pub fn all() -> Self {
        ModalityMask {
            media: true,
            ui: true,
            bi: true,
        }
    }

    pub fn none() -> Self {
        ModalityMask {
            media: false,
            ui: false,
            bi: false,
        }
    }

    pub fn only(m: Modality) -> Self {
        let mut mask = ModalityMask::none();
        mask.set(m, true);
        mask
    }

    pub fn set(&mut self, m: Modality, on: bool) {
        match m {
            Modality::Media => self.media = on,
            Modality::UserLevel => self.ui = on,
            Modality::BundleLevel => self.bi = on,
        }
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Media => self.media,
            Modality::UserLevel => self.ui,
            Modality::BundleLevel => self.bi,
        }
    }

    /// Masked-in modalities in fixed (media, ui, bi) order.
    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }

    pub fn is_empty(&self) -> bool {
        !(self.media || self.ui || self.bi)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = self.iter().map(|m| m.short_name()).collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMode {
    pub tokenization: Tokenization,
    pub separator: Separator,
    pub modalities: ModalityMask,
    /// Whether the item's own text appears; unimodal non-text ablation rows
    /// switch this off.
    pub include_item_text: bool,
}

impl PromptMode {
    pub fn text_only() -> Self {
        PromptMode {
            tokenization: Tokenization::TextOnly,
            separator: Separator::None,
            modalities: ModalityMask::none(),
            include_item_text: true,
        }
    }

    pub fn fusion(separator: Separator, modalities: ModalityMask) -> Self {
        PromptMode {
            tokenization: Tokenization::Fusion,
            separator,
            modalities,
            include_item_text: true,
        }
    }

    pub fn prompt_style(modalities: ModalityMask) -> Self {
        PromptMode {
            tokenization: Tokenization::PromptStyle,
            separator: Separator::None,
            modalities,
            include_item_text: true,
        }
    }

    pub fn label(&self) -> String {
        match self.tokenization {
            Tokenization::TextOnly => "text_only".into(),
            Tokenization::Fusion => {
                let sep = match self.separator {
                    Separator::Textual => "textual",
                    Separator::None => "none",
                    Separator::Soft => "soft",
                };
                let text = if self.include_item_text { "" } else { ",notext" };
                format!("fusion(sep={sep},{}{text})", self.modalities.label())
            }
            Tokenization::PromptStyle => {
                let text = if self.include_item_text { "" } else { ",notext" };
                format!("prompt({}{text})", self.modalities.label())
            }
        }
    }
}

/// Per-position provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Vocab(u32),
    Sep,
    Fused(u32),
    Feature(u32, Modality),
}

impl Position {
    pub fn is_vocab(&self) -> bool {
        matches!(self, Position::Vocab(_))
    }
}

/// Mode-expanded prompt layout, before any embedding is materialized.
/// Rebuilding embeddings from the plan is cheap, which matters because
/// injected positions depend on parameters that change every training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub positions: Vec<Position>,
    pub target_ids: Vec<u32>,
    pub positive_index: usize,
    pub n_candidates: usize,
    pub bundle_id: u32,
    pub rendered_template: String,
}

impl PromptPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// True when no separator/fused/feature positions exist.
    pub fn is_pure_text(&self) -> bool {
        self.positions.iter().all(Position::is_vocab)
    }
}

/// Ordered embedding sequence plus provenance tags.
#[derive(Debug, Clone)]
pub struct HybridTokenSequence {
    pub embeddings: Mat,
    pub tags: Vec<Position>,
    pub rendered_template: String,
}

/// Token count of a sequence, the quantity behind the efficiency report.
pub fn count_tokens(seq: &HybridTokenSequence) -> usize {
    seq.tags.len()
}

fn letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

fn push_text(positions: &mut Vec<Position>, rendered: &mut String, vocab: &Vocabulary, text: &str) {
    for tok in crate::tinylm::tokenize(text) {
        positions.push(Position::Vocab(vocab.id_of(&tok)));
    }
    if !rendered.is_empty() && !rendered.ends_with('\n') {
        rendered.push(' ');
    }
    rendered.push_str(text);
}

fn push_item(
    positions: &mut Vec<Position>,
    rendered: &mut String,
    vocab: &Vocabulary,
    world: &World,
    mode: &PromptMode,
    item_id: u32,
) {
    let item = world.item(item_id);
    if mode.include_item_text || mode.tokenization == Tokenization::TextOnly {
        push_text(positions, rendered, vocab, &item.text);
    }
    match mode.tokenization {
        Tokenization::TextOnly => {}
        Tokenization::Fusion => {
            match mode.separator {
                Separator::Textual => {
                    push_text(positions, rendered, vocab, TEXTUAL_SEPARATOR);
                }
                Separator::None => {}
                Separator::Soft => {
                    positions.push(Position::Sep);
                    rendered.push_str(" <sep>");
                }
            }
            positions.push(Position::Fused(item_id));
            rendered.push_str(" <fused>");
        }
        Tokenization::PromptStyle => {
            for m in mode.modalities.iter() {
                push_text(positions, rendered, vocab, modality_indicator(m));
                positions.push(Position::Feature(item_id, m));
                rendered.push_str(" <feature>");
            }
        }
    }
}

/// Expand an instance into a position plan under the given mode. The
/// context limit is checked here so overflow errors name the instance.
pub fn build_plan(
    instance: &PromptInstance,
    world: &World,
    vocab: &Vocabulary,
    mode: &PromptMode,
    context_limit: usize,
) -> Result<PromptPlan> {
    if instance.candidates.len() > 26 {
        return Err(Error::Config(format!(
            "{} candidates exceed the A-Z option range",
            instance.candidates.len()
        )));
    }
    if instance.positive_index >= instance.candidates.len() {
        return Err(Error::Data("positive index out of range".into()));
    }
    let mut positions = Vec::new();
    let mut rendered = String::new();
    // Prompts align with pretraining lines, which all start with BOS.
    positions.push(Position::Vocab(BOS_ID));

    for line in TEMPLATE_SKELETON.lines() {
        match line.trim() {
            "{instruction}" => push_text(&mut positions, &mut rendered, vocab, INSTRUCTION),
            "{seeds}" => {
                for (k, &item_id) in instance.seed_items.iter().enumerate() {
                    push_text(&mut positions, &mut rendered, vocab, &format!("{} .", k + 1));
                    push_item(&mut positions, &mut rendered, vocab, world, mode, item_id);
                }
            }
            "{candidates}" => {
                for (j, &item_id) in instance.candidates.iter().enumerate() {
                    push_text(&mut positions, &mut rendered, vocab, &format!("{} .", letter(j)));
                    push_item(&mut positions, &mut rendered, vocab, world, mode, item_id);
                }
            }
            "{answer_cue}" => push_text(&mut positions, &mut rendered, vocab, ANSWER_CUE),
            other => push_text(&mut positions, &mut rendered, vocab, other),
        }
        rendered.push('\n');
    }

    let target_ids = vec![letter_id(instance.positive_index), EOS_ID];
    // The full training sequence appends the letter before predicting EOS.
    if positions.len() + 1 > context_limit {
        return Err(Error::ContextLength {
            len: positions.len() + 1,
            max: context_limit,
            detail: format!(
                "bundle {} with {} candidates under mode {}",
                instance.bundle_id,
                instance.candidates.len(),
                mode.label()
            ),
        });
    }
    Ok(PromptPlan {
        positions,
        target_ids,
        positive_index: instance.positive_index,
        n_candidates: instance.candidates.len(),
        bundle_id: instance.bundle_id,
        rendered_template: rendered,
    })
}

/// Caches for injected positions, aligned with the plan; `None` for vocab
/// positions. Stage-2 training backpropagates through these.
pub enum InjectionCache {
    Fused(Box<FuseCache>),
    Feature(Box<SingleCache>),
}

/// Parameters and tables needed to turn a plan into embeddings.
pub struct MaterializeCtx<'a> {
    pub lm: &'a BaseLm,
    pub fusion: &'a FusionParams,
    pub separator: &'a SoftSeparator,
    pub tables: &'a ModalityTables,
    pub mask: ModalityMask,
}

impl<'a> MaterializeCtx<'a> {
    fn fusion_inputs(&self, item_id: u32) -> Result<FusionInputs> {
        let masked = |m: Modality| -> Result<Vec<f64>> {
            if self.mask.contains(m) {
                Ok(self.tables.table(m).row(item_id)?.to_vec())
            } else {
                // Zero rows take the learned missing-modality path.
                Ok(vec![0.0; self.tables.table(m).dim])
            }
        };
        Ok(FusionInputs {
            media: masked(Modality::Media)?,
            user: masked(Modality::UserLevel)?,
            bundle: masked(Modality::BundleLevel)?,
        })
    }
}

pub fn materialize(plan: &PromptPlan, ctx: &MaterializeCtx) -> Result<HybridTokenSequence> {
    let (seq, _) = materialize_with_caches(plan, ctx)?;
    Ok(seq)
}

pub fn materialize_with_caches(
    plan: &PromptPlan,
    ctx: &MaterializeCtx,
) -> Result<(HybridTokenSequence, Vec<Option<InjectionCache>>)> {
    let d = ctx.lm.config.d_model;
    let mut emb = Mat::zeros(plan.positions.len(), d);
    let mut caches: Vec<Option<InjectionCache>> = Vec::with_capacity(plan.positions.len());
    for (t, pos) in plan.positions.iter().enumerate() {
        match pos {
            Position::Vocab(id) => {
                emb.row_mut(t)
                    .copy_from_slice(ctx.lm.params.embed.row(*id as usize));
                caches.push(None);
            }
            Position::Sep => {
                emb.row_mut(t).copy_from_slice(ctx.separator.vec.row(0));
                caches.push(None);
            }
            Position::Fused(item_id) => {
                let inputs = ctx.fusion_inputs(*item_id)?;
                let (vec, cache) = fuse_forward(&inputs, ctx.fusion)?;
                emb.row_mut(t).copy_from_slice(&vec);
                caches.push(Some(InjectionCache::Fused(Box::new(cache))));
            }
            Position::Feature(item_id, modality) => {
                let raw = ctx.tables.table(*modality).row(*item_id)?.to_vec();
                let (vec, cache) = project_single_forward(*modality, &raw, ctx.fusion)?;
                emb.row_mut(t).copy_from_slice(&vec);
                caches.push(Some(InjectionCache::Feature(Box::new(cache))));
            }
        }
    }
    Ok((
        HybridTokenSequence {
            embeddings: emb,
            tags: plan.positions.clone(),
            rendered_template: plan.rendered_template.clone(),
        },
        caches,
    ))
}

/// Plan + materialize in one call.
pub fn build_prompt(
    instance: &PromptInstance,
    world: &World,
    vocab: &Vocabulary,
    mode: &PromptMode,
    ctx: &MaterializeCtx,
) -> Result<(HybridTokenSequence, Vec<u32>)> {
    let plan = build_plan(instance, world, vocab, mode, ctx.lm.config.context)?;
    let seq = materialize(&plan, ctx)?;
    Ok((seq, plan.target_ids))
}

/// Plain-text rendering of a text-only prompt, for corpus building. The
/// layout matches `build_plan` with `PromptMode::text_only()` token for
/// token.
pub fn render_text_prompt(instance: &PromptInstance, world: &World) -> String {
    let mut out = String::new();
    for line in TEMPLATE_SKELETON.lines() {
        let mut push = |s: &str| {
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(s);
        };
        match line.trim() {
            "{instruction}" => push(INSTRUCTION),
            "{seeds}" => {
                for (k, &id) in instance.seed_items.iter().enumerate() {
                    push(&format!("{} .", k + 1));
                    push(&world.item(id).text);
                }
            }
            "{candidates}" => {
                for (j, &id) in instance.candidates.iter().enumerate() {
                    push(&format!("{} .", letter(j)));
                    push(&world.item(id).text);
                }
            }
            "{answer_cue}" => push(ANSWER_CUE),
            other => push(other),
        }
        out.push('\n');
    }
    out
}

/// INVALID answers parse to `None`: anything that does not normalize to a
/// single in-range option letter.
pub fn parse_answer(text: &str, n_candidates: usize) -> Option<usize> {
    let trimmed = text
        .trim()
        .trim_end_matches(|c: char| c.is_whitespace() || ".,:;!?".contains(c));
    let mut chars = trimmed.chars();
    let first = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let index = (first.to_ascii_uppercase() as u8 - b'A') as usize;
    if index < n_candidates {
        Some(index)
    } else {
        None
    }
}
