use std::io::{BufRead, Write};

use super::protocol::{decode_request, encode_line, Reply, Request, Response};
use super::TranslationModel;
use crate::error::{Error, Result};
use crate::text::Sentence;

/// Serves `model` over the line protocol until `input` reaches EOF.
///
/// The first request must be `hello`. Unparseable lines get an error reply
/// with id `-1`; per-request failures are reported and the loop continues.
pub fn serve<M: TranslationModel + ?Sized>(
    model: &M,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let mut greeted = false;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match decode_request(&line) {
            Err(e) => Response::error(-1, format!("malformed request: {e}")),
            Ok(req) => {
                let id = req.id() as i64;
                if !greeted && !matches!(req, Request::Hello { .. }) {
                    Response::error(id, "hello must be the first request")
                } else {
                    greeted = true;
                    respond(model, req)
                }
            }
        };
        output.write_all(encode_line(&response)?.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}

/// Answers a single request.
pub fn respond<M: TranslationModel + ?Sized>(model: &M, req: Request) -> Response {
    let id = req.id() as i64;
    match handle(model, req) {
        Ok(reply) => Response { id, reply },
        Err(e) => Response::error(id, e.to_string()),
    }
}

fn sentence(ids: Vec<u32>, vocab_size: usize) -> Result<Sentence> {
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::UnknownTokenId {
            id,
            size: vocab_size,
        });
    }
    Sentence::new(ids)
}

fn handle<M: TranslationModel + ?Sized>(model: &M, req: Request) -> Result<Reply> {
    let n = model.vocab().len();
    Ok(match req {
        Request::Hello { .. } => Reply::Hello {
            vocab: model.vocab().tokens().to_vec(),
            model_id: model.model_id().to_string(),
            capabilities: model.capabilities().names(),
        },
        Request::Decode { src, .. } => Reply::Decode {
            hyp: model.decode(&sentence(src, n)?)?.into_ids(),
        },
        Request::Nll { src, reference, .. } => Reply::Nll {
            nll: model.nll(&sentence(src, n)?, &sentence(reference, n)?)?,
        },
        Request::Proposal {
            src,
            reference,
            pos,
            ..
        } => Reply::Proposal {
            probs: model.proposal(&sentence(src, n)?, &sentence(reference, n)?, pos)?,
        },
        Request::Nbest { src, k, .. } => Reply::Nbest {
            hyps: model
                .n_best(&sentence(src, n)?, k)?
                .into_iter()
                .map(Sentence::into_ids)
                .collect(),
        },
    })
}
