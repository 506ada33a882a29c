use super::{DecodingParams, Generator};
use crate::error::BackendError;
use crate::retrieval::AugmentedInput;

/// Mock generator: replies with the last line of the first assembled input,
/// without its speaker tag. Since contexts end with the newest utterance this
/// echoes the human's last message.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn name(&self) -> &str {
        "echo"
    }

    fn generate(
        &self,
        input: &AugmentedInput,
        _params: &DecodingParams,
    ) -> Result<String, BackendError> {
        let text = input
            .items
            .first()
            .map(|i| i.text.as_str())
            .ok_or_else(|| BackendError::Failed("no input to echo".into()))?;
        let line = text.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let reply = strip_speaker_tag(line).trim();
        if reply.is_empty() {
            return Err(BackendError::Failed("nothing to echo".into()));
        }
        Ok(reply.to_string())
    }
}

pub(crate) fn strip_speaker_tag(line: &str) -> &str {
    for tag in ["S1:", "S2:"] {
        if let Some(rest) = line.strip_prefix(tag) {
            return rest;
        }
    }
    line
}
