//! The small frozen-base language model: tokenizer, transformer stack with
//! manual backprop, low-rank adapters, answer loss, and greedy decoding.

mod model;
mod pretrain;
mod separator;
mod vocab;

pub use model::{
    answer_loss, answer_loss_and_grad, apply_lora, generate_answer, BaseLm, BaseParams,
    BlockAdapters, ForwardCache, LmConfig, LmGrads, LoraAdapters, LoraConfig, LoraPair,
};
pub use pretrain::{heldout_perplexity, pretrain_base, PretrainConfig, PretrainReport};
pub use separator::SoftSeparator;
pub use vocab::{letter_id, tokenize, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
