//! Emits (or verifies) the plain-text op test vectors.
//!
//! ```bash
//! cargo run -p fedskew --example op_vectors > crates/core/testdata/ops.vectors
//! cargo run -p fedskew --example op_vectors -- --verify crates/core/testdata/ops.vectors
//! ```

use fedskew::numkit::vectors;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.as_slice() {
        [flag, path] if flag == "--verify" => {
            let text = std::fs::read_to_string(path)?;
            let mut failed = 0;
            for case in vectors::parse_file(&text)? {
                let ok = case.verify()?;
                failed += usize::from(!ok);
                println!("{} {}", if ok { "ok  " } else { "FAIL" }, case.to_line());
            }
            if failed > 0 {
                return Err(format!("{failed} vectors failed").into());
            }
        }
        [] => print!("{}", vectors::write_file(&vectors::default_suite()?)),
        _ => return Err("usage: op_vectors [--verify FILE]".into()),
    }
    Ok(())
}
