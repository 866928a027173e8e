//! Minimal `her2-sidecar` server backed by the built-in colour rules.
//!
//! Used by the gateway tests. Flags:
//!
//! ```text
//! her2-test-sidecar [--roles tumor,stain,segment] [--version N]
//!                   [--mode rule|echo|bad-labels|error|crash|silent|wrong-id]
//! ```
//!
//! `echo` answers segment requests with the red channel of each pixel as its
//! label, so a test can round-trip an arbitrary label map through the pipe.

use std::io::{self, BufRead, Write};
use std::time::Duration;

use her2_core::gateway::sidecar::{
    encode_b64, rule_response, Handshake, Request, Response, PROTOCOL_NAME,
};

fn main() {
    let mut roles = "tumor,stain,segment".to_string();
    let mut version = 1u32;
    let mut mode = "rule".to_string();
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let value = args.next().unwrap_or_default();
        match flag.as_str() {
            "--roles" => roles = value,
            "--version" => version = value.parse().expect("--version takes an integer"),
            "--mode" => mode = value,
            other => {
                eprintln!("unknown flag {other}");
                std::process::exit(2);
            }
        }
    }

    if mode == "silent" {
        std::thread::sleep(Duration::from_secs(600));
        return;
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let handshake = Handshake {
        protocol: PROTOCOL_NAME.to_string(),
        version,
        roles: roles.split(',').map(str::to_string).collect(),
    };
    writeln!(out, "{}", serde_json::to_string(&handshake).unwrap()).unwrap();
    out.flush().unwrap();

    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        let response = match serde_json::from_str::<Request>(&line) {
            Err(_) => Response {
                error: Some("unparseable".into()),
                ..Response::default()
            },
            Ok(req) => match mode.as_str() {
                "crash" => {
                    eprintln!("model exploded on request {}", req.id);
                    std::process::exit(70);
                }
                "error" => Response {
                    id: Some(req.id),
                    error: Some("out of memory".into()),
                    ..Response::default()
                },
                "wrong-id" => Response {
                    id: Some(req.id + 1000),
                    ..rule_response(&req)
                },
                "bad-labels" if req.role == "segment" => Response {
                    id: Some(req.id),
                    labels_b64: Some(encode_b64(&vec![7u8; (req.width * req.height) as usize])),
                    ..Response::default()
                },
                "echo" if req.role == "segment" => {
                    let px = her2_core::gateway::sidecar::decode_b64(&req.pixels_b64).unwrap();
                    let labels: Vec<u8> = px.chunks_exact(3).map(|p| p[0]).collect();
                    Response {
                        id: Some(req.id),
                        labels_b64: Some(encode_b64(&labels)),
                        ..Response::default()
                    }
                }
                _ => rule_response(&req),
            },
        };
        writeln!(out, "{}", serde_json::to_string(&response).unwrap()).unwrap();
        out.flush().unwrap();
    }
}
