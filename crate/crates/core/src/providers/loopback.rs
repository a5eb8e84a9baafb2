//! Echo adapter used for protocol tests: logit `k` of an image is the mean
//! of its channel `k mod channels`.

use std::io::{self, Read, Write};

use super::wire::{read_message, write_message, Hello, Message, WireError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopbackConfig {
    pub hello: Hello,
    /// Exit without answering once this many batches were answered.
    pub die_after: Option<usize>,
    /// Answer with a malformed response once this many batches were answered.
    pub garbage_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopbackExit {
    Shutdown,
    Eof,
    Died { answered: usize },
}

pub fn channel_mean_logits(hello: &Hello, image: &[f32]) -> Vec<f32> {
    let plane = hello.height as usize * hello.width as usize;
    let means: Vec<f32> = image
        .chunks_exact(plane)
        .map(|ch| (ch.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64) as f32)
        .collect();
    (0..hello.num_classes as usize)
        .map(|k| means[k % means.len()])
        .collect()
}

pub fn serve(input: &mut impl Read, output: &mut impl Write, cfg: &LoopbackConfig) -> io::Result<LoopbackExit> {
    let hello = cfg.hello;
    write_message(output, &Message::Hello(hello))?;
    let image_len = hello.image_len();
    let mut answered = 0;
    loop {
        let msg = match read_message(input) {
            Ok(m) => m,
            Err(WireError::Eof) => return Ok(LoopbackExit::Eof),
            Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
        };
        match msg {
            Message::InferRequest { batch, data } => {
                if cfg.die_after == Some(answered) {
                    return Ok(LoopbackExit::Died { answered });
                }
                if cfg.garbage_after == Some(answered) {
                    write_message(
                        output,
                        &Message::InferResponse {
                            batch: batch + 1,
                            data: vec![0.0],
                        },
                    )?;
                    answered += 1;
                    continue;
                }
                if data.len() != batch as usize * image_len {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("request holds {} floats for batch {batch}", data.len()),
                    ));
                }
                let logits = data
                    .chunks_exact(image_len.max(1))
                    .flat_map(|img| channel_mean_logits(&hello, img))
                    .collect();
                write_message(output, &Message::InferResponse { batch, data: logits })?;
                answered += 1;
            }
            Message::Shutdown => return Ok(LoopbackExit::Shutdown),
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("unexpected message type 0x{:02x}", other.type_byte()),
                ))
            }
        }
    }
}
