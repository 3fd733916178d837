use clap::Parser;

use docnmt::cli::{run, Cli};

fn main() {
    // DOCNMT_THREADS caps worker parallelism for parallel translation.
    if let Ok(v) = std::env::var("DOCNMT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path too; usage
            // problems exit 1, help requests exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(run(cli));
}
