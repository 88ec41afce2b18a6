//! Tokenization, prompt templates, learnable context and the text encoder.

mod bank;
mod encoder;
mod prompt;
mod vocab;

pub use bank::{embed_prompt_bank, BankClass, ClassBank, PromptBank};
pub use encoder::{
    encode_text, encode_texts, init_context, nearest_tokens, ContextInit, ContextVectors,
    PromptTokens,
};
pub use prompt::{build_prompt, ClassPosition, PromptSpec, Role, CLASS_SLOT, MODALITY_SLOT};
pub use vocab::{normalize_word, Tokenizer, Vocab, CLS, PAD, UNK};
