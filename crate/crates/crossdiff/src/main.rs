use crossdiff::cli;

fn main() {
    let code = cli::run_cli(std::env::args_os());
    std::process::exit(code);
}
