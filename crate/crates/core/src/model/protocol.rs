//! Newline-delimited JSON messages exchanged with a model process over its
//! standard input and output.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::text::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        id: u64,
    },
    Decode {
        id: u64,
        src: Vec<TokenId>,
    },
    Nll {
        id: u64,
        src: Vec<TokenId>,
        #[serde(rename = "ref")]
        reference: Vec<TokenId>,
    },
    Proposal {
        id: u64,
        src: Vec<TokenId>,
        #[serde(rename = "ref")]
        reference: Vec<TokenId>,
        pos: usize,
    },
    Nbest {
        id: u64,
        src: Vec<TokenId>,
        k: usize,
    },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Request::Hello { id }
            | Request::Decode { id, .. }
            | Request::Nll { id, .. }
            | Request::Proposal { id, .. }
            | Request::Nbest { id, .. } => *id,
        }
    }

    pub fn with_id(mut self, new_id: u64) -> Self {
        match &mut self {
            Request::Hello { id }
            | Request::Decode { id, .. }
            | Request::Nll { id, .. }
            | Request::Proposal { id, .. }
            | Request::Nbest { id, .. } => *id = new_id,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Hello {
        vocab: Vec<String>,
        model_id: String,
        capabilities: Vec<String>,
    },
    Decode {
        hyp: Vec<TokenId>,
    },
    Nll {
        nll: f64,
    },
    Proposal {
        probs: Vec<f64>,
    },
    Nbest {
        hyps: Vec<Vec<TokenId>>,
    },
    Error {
        error: String,
    },
}

/// A response line. `id` is `-1` when the request could not be parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: i64,
    #[serde(flatten)]
    pub reply: Reply,
}

impl Response {
    pub fn error(id: i64, message: impl Into<String>) -> Self {
        Self {
            id,
            reply: Reply::Error {
                error: message.into(),
            },
        }
    }
}

pub fn encode_line<T: Serialize>(msg: &T) -> Result<String> {
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    Ok(line)
}

pub fn decode_request(line: &str) -> Result<Request> {
    Ok(serde_json::from_str(line.trim_end())?)
}

pub fn decode_response(line: &str) -> Result<Response> {
    Ok(serde_json::from_str(line.trim_end())?)
}
