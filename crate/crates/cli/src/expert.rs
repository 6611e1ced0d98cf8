//! External expert scorer: a subprocess speaking newline-delimited JSON.
//!
//! Request: `{"type":"score_group","images":[<base64 PNG per member>],
//! "reference":<base64 PNG>,"dims":["quality","realism","consistency"]}`.
//! Response: `{"scores":[f1,...,fG]}` with every value in [0,1]. A spawn
//! failure, timeout, or malformed reply yields `None`, which the reward
//! layer treats as "fall back to the composite scorer" — never fatal.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::codecs::png::PngEncoder;
use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use stepsr_core::image::RgbImage;
use stepsr_core::rewards::GroupScorer;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct Request<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    images: &'a [String],
    reference: &'a str,
    dims: [&'static str; 3],
}

#[derive(Deserialize)]
struct Response {
    scores: Vec<f64>,
}

/// Judges groups of restored images via the configured command, one request
/// per line on its standard streams.
pub struct ExpertScorer {
    command: String,
    timeout: Duration,
    child: Option<Child>,
    stdin: Option<ChildStdin>,
    replies: Option<Receiver<String>>,
}

impl ExpertScorer {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            timeout: DEFAULT_TIMEOUT,
            child: None,
            stdin: None,
            replies: None,
        }
    }

    pub fn with_timeout(command: &str, timeout: Duration) -> Self {
        let mut scorer = Self::new(command);
        scorer.timeout = timeout;
        scorer
    }

    fn ensure_spawned(&mut self) -> Option<()> {
        if self.child.is_some() {
            return Some(());
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .ok()?;
        let stdin = child.stdin.take()?;
        let stdout = child.stdout.take()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            let mut line = String::new();
            loop {
                line.clear();
                match reader.read_line(&mut line) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {
                        if tx.send(line.trim_end().to_string()).is_err() {
                            break;
                        }
                    }
                }
            }
        });
        self.child = Some(child);
        self.stdin = Some(stdin);
        self.replies = Some(rx);
        Some(())
    }

    /// Tears the subprocess down; a late reply from a timed-out request must
    /// never be mistaken for the answer to the next one.
    fn teardown(&mut self) {
        self.stdin = None;
        self.replies = None;
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    fn try_score(&mut self, fine_outputs: &[RgbImage], reference: &RgbImage) -> Option<Vec<f64>> {
        self.ensure_spawned()?;
        let images: Vec<String> = fine_outputs
            .iter()
            .map(|img| png_base64(img))
            .collect::<Option<_>>()?;
        let request = Request {
            kind: "score_group",
            images: &images,
            reference: &png_base64(reference)?,
            dims: ["quality", "realism", "consistency"],
        };
        let mut line = serde_json::to_string(&request).ok()?;
        line.push('\n');
        let stdin = self.stdin.as_mut()?;
        stdin.write_all(line.as_bytes()).ok()?;
        stdin.flush().ok()?;
        let reply = self.replies.as_ref()?.recv_timeout(self.timeout).ok()?;
        let response: Response = serde_json::from_str(&reply).ok()?;
        if response.scores.len() == fine_outputs.len()
            && response.scores.iter().all(|s| (0.0..=1.0).contains(s))
        {
            Some(response.scores)
        } else {
            None
        }
    }
}

impl GroupScorer for ExpertScorer {
    fn score_group(&mut self, fine_outputs: &[RgbImage], reference: &RgbImage) -> Option<Vec<f64>> {
        let result = self.try_score(fine_outputs, reference);
        if result.is_none() {
            self.teardown();
        }
        result
    }
}

impl Drop for ExpertScorer {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn png_base64(img: &RgbImage) -> Option<String> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(
            &img.data,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .ok()?;
    Some(BASE64.encode(buf))
}
