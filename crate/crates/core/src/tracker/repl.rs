use std::io::{BufRead, Write};

use super::{TrackSession, TurnModel};
use crate::error::{Error, Result};

fn list(triplets: impl IntoIterator<Item = impl std::fmt::Display>) -> String {
    let v: Vec<String> = triplets.into_iter().map(|t| t.to_string()).collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(", ")
    }
}

/// Reads alternating system and user lines; a turn runs after each user
/// line. Lines starting with `:` are commands (`:reset`, `:state`,
/// `:quit`). With `prompt` set, a prompt is written before every read.
pub fn run_repl<R: BufRead, W: Write>(model: &dyn TurnModel, input: R, mut out: W, prompt: bool) -> Result<()> {
    let io_err = |e| Error::io("<stdout>", e);
    let mut session = TrackSession::new("repl");
    let mut pending_sys: Option<String> = None;
    let mut lines = input.lines().enumerate();
    loop {
        if prompt {
            let p = if pending_sys.is_some() { "user> " } else { "system> " };
            write!(out, "{p}").map_err(io_err)?;
            out.flush().map_err(io_err)?;
        }
        let Some((n, line)) = lines.next() else { break };
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let text = line.trim();
        if let Some(cmd) = text.strip_prefix(':') {
            match cmd.trim() {
                "quit" => break,
                "reset" => {
                    session.reset();
                    pending_sys = None;
                    writeln!(out, "reset").map_err(io_err)?;
                }
                "state" => {
                    let json = serde_json::to_string(&session.belief).expect("belief serializes");
                    writeln!(out, "{json}").map_err(io_err)?;
                }
                other => {
                    return Err(Error::Script {
                        line: n + 1,
                        message: format!("unknown command :{other}"),
                    })
                }
            }
            continue;
        }
        match pending_sys.take() {
            None => pending_sys = Some(text.to_string()),
            Some(sys) => {
                let turn = session.turn_index;
                let r = session.track_turn(model, &sys, text);
                writeln!(out, "turn {turn}").map_err(io_err)?;
                writeln!(out, "  domain: {}", r.domain).map_err(io_err)?;
                writeln!(out, "  new: {}", list(&r.new_triplets)).map_err(io_err)?;
                writeln!(out, "  removed: {}", list(&r.removals)).map_err(io_err)?;
                writeln!(out, "  state: {}", list(session.belief.triplets())).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, DialogueTurn, Triplet};
    use crate::tracker::ScriptedPredictor;

    #[test]
    fn scripted_transcript() {
        let d = Dialogue::new(
            "repl",
            vec![
                DialogueTurn {
                    sys_utterance: String::new(),
                    user_utterance: "a train from ely".into(),
                    gold_domain: "train".into(),
                    gold_adds: [Triplet::new("train", "departure", "ely")].into(),
                    gold_removes: Default::default(),
                    turn_index: 0,
                },
                DialogueTurn {
                    sys_utterance: "ok".into(),
                    user_utterance: "to london".into(),
                    gold_domain: "train".into(),
                    gold_adds: [Triplet::new("train", "destination", "london")].into(),
                    gold_removes: Default::default(),
                    turn_index: 1,
                },
            ],
        );
        let stub = ScriptedPredictor::perfect(&[d]);
        let script = "\na train from ely\nok\nto london\n:state\n:reset\n:state\n:quit\nignored\n";
        let mut out = Vec::new();
        run_repl(&stub, script.as_bytes(), &mut out, false).unwrap();
        let text = String::from_utf8(out).unwrap();
        let want = "turn 0\n  domain: train\n  new: (train, departure, ely)\n  removed: -\n  state: (train, departure, ely)\n\
turn 1\n  domain: train\n  new: (train, destination, london)\n  removed: -\n  state: (train, departure, ely), (train, destination, london)\n\
[[\"train\",\"departure\",\"ely\"],[\"train\",\"destination\",\"london\"]]\nreset\n[]\n";
        assert_eq!(text, want);
        let err = run_repl(&stub, ":bogus\n".as_bytes(), Vec::new(), false).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
