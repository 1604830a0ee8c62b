//! Reference foreign-process target speaking the stdin/stdout bridge
//! protocol. Useful as a template for wrapping models written in other
//! languages, and as the counterparty in the bridge tests.
//!
//! ```text
//! roost-bridge-demo --model echo
//! roost-bridge-demo --model coinflip --n 100 --y 40
//! roost-bridge-demo --model nan          (misbehaves on purpose)
//! ```
//!
//! Protocol: reply `ok` to `hello <dim>`; reply one float (or `-inf`) per
//! `logd <beta> <x1> ... <xd>` request.

use std::io::{BufRead, Write};

struct Options {
    model: String,
    n: u64,
    y: u64,
}

fn parse_args() -> Result<Options, String> {
    let mut options = Options {
        model: "echo".to_string(),
        n: 2,
        y: 1,
    };
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        let mut take = |name: &str| args.next().ok_or(format!("{name} needs a value"));
        match arg.as_str() {
            "--model" => options.model = take("--model")?,
            "--n" => options.n = take("--n")?.parse().map_err(|e| format!("--n: {e}"))?,
            "--y" => options.y = take("--y")?.parse().map_err(|e| format!("--y: {e}"))?,
            other => return Err(format!("unknown argument {other}")),
        }
    }
    if !["echo", "coinflip", "nan"].contains(&options.model.as_str()) {
        return Err(format!("unknown model {}", options.model));
    }
    if options.y > options.n {
        return Err("coinflip needs y <= n".to_string());
    }
    Ok(options)
}

/// Tempered coinflip log density with the uniform prior as reference:
/// `beta * (log C(n,y) + y log(p1 p2) + (n-y) log(1 - p1 p2))` on the unit
/// square, `-inf` outside.
fn coinflip_logd(n: u64, y: u64, beta: f64, x: &[f64]) -> f64 {
    if x.len() != 2 {
        return f64::NEG_INFINITY;
    }
    let (p1, p2) = (x[0], x[1]);
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
        return f64::NEG_INFINITY;
    }
    if beta == 0.0 {
        return 0.0;
    }
    let p = p1 * p2;
    let log_choose = if y == 0 || y == n {
        0.0
    } else {
        statrs::function::gamma::ln_gamma(n as f64 + 1.0)
            - statrs::function::gamma::ln_gamma(y as f64 + 1.0)
            - statrs::function::gamma::ln_gamma((n - y) as f64 + 1.0)
    };
    let mut logd = log_choose;
    if y > 0 {
        logd += y as f64 * p.ln();
    }
    if n - y > 0 {
        logd += (n - y) as f64 * (1.0 - p).ln();
    }
    if logd == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    beta * logd
}

fn main() {
    let options = match parse_args() {
        Ok(options) => options,
        Err(msg) => {
            eprintln!("roost-bridge-demo: {msg}");
            std::process::exit(2);
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(line) => line,
            Err(_) => break,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["hello", _dim] => {
                writeln!(out, "ok").unwrap();
            }
            ["logd", rest @ ..] if !rest.is_empty() => {
                let beta: f64 = rest[0].parse().unwrap_or(f64::NAN);
                let x: Vec<f64> = rest[1..]
                    .iter()
                    .map(|s| s.parse().unwrap_or(f64::NAN))
                    .collect();
                let value = match options.model.as_str() {
                    "echo" => 0.0,
                    "coinflip" => coinflip_logd(options.n, options.y, beta, &x),
                    "nan" => f64::NAN,
                    _ => unreachable!(),
                };
                if value == f64::NEG_INFINITY {
                    writeln!(out, "-inf").unwrap();
                } else {
                    writeln!(out, "{value}").unwrap();
                }
            }
            _ => {
                eprintln!("roost-bridge-demo: unrecognized request {line:?}");
                std::process::exit(1);
            }
        }
        out.flush().unwrap();
    }
}
