//! Write a CSV draw from one of the built-in simulation designs.
//!
//! Usage: gen_csv <example 1|2> <n> <seed> <path>

use std::fs;

use simix::simlab::{gen_example1, gen_example2};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 5 {
        eprintln!("usage: gen_csv <example 1|2> <n> <seed> <path>");
        std::process::exit(2);
    }
    let example: u8 = args[1].parse().expect("example must be 1 or 2");
    let n: usize = args[2].parse().expect("n must be an integer");
    let seed: u64 = args[3].parse().expect("seed must be an integer");
    let data = match example {
        1 => gen_example1(n, seed).0,
        2 => gen_example2(n, seed).0,
        _ => {
            eprintln!("unknown example {example}");
            std::process::exit(2);
        }
    };
    let mut out = String::from("x1,x2,x3,y\n");
    for i in 0..n {
        out.push_str(&format!(
            "{:.15},{:.15},{:.15},{:.15}\n",
            data.x[(i, 0)],
            data.x[(i, 1)],
            data.x[(i, 2)],
            data.y[i]
        ));
    }
    fs::write(&args[4], out).expect("write failed");
}
