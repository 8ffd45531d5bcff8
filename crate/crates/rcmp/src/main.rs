fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RCMP_LOG", "info")).format_timestamp(None).init();
    let code = rcmp::cli::run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
