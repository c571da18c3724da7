use std::process;

fn main() {
    process::exit(lskt::cli::main_with_args(std::env::args_os()));
}
