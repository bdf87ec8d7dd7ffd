use clap::Parser;

fn main() {
    let cli = wlas::cli::Cli::parse();
    match wlas::cli::run(&cli) {
        Ok(out) => {
            if !out.message.is_empty() {
                println!("{}", out.message.trim_end());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
