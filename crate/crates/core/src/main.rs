fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = rewardbench::cli::main_with(std::env::args_os(), std::env::vars());
    std::process::exit(code);
}
