//! SQL lexing and token embeddings.

pub mod embedding;
pub mod lexer;

pub use embedding::{
    embed, embed_batch, train_embeddings, EmbeddedQuery, EmbeddingConfig, EmbeddingTable, EMBED_DIM,
};
pub use lexer::{detokenize, tokenize, Token, TokenKind, TokenSequence, TokenizeOptions, PAD_TEXT, SEQ_LEN};
