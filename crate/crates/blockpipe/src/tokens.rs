//! Token ids and fixed-length token sequences.

use serde::{Deserialize, Serialize};

pub type Token = u32;

/// Fixed-length sequence of token ids. The reserved mask token is a
/// model-config concern; helpers that care about it take it as an argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn filled(len: usize, token: Token) -> Self {
        Self(vec![token; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Token {
        self.0[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: Token) {
        self.0[i] = t;
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Token> {
        self.0.iter()
    }

    pub fn contains(&self, token: Token) -> bool {
        self.0.contains(&token)
    }

    pub fn count_of(&self, token: Token) -> usize {
        self.0.iter().filter(|&&t| t == token).count()
    }

    pub fn positions_of(&self, token: Token) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == token).then_some(i))
            .collect()
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for TokenSeq {
    type Output = Token;
    fn index(&self, i: usize) -> &Token {
        &self.0[i]
    }
}
