fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = tsc_core::cli::run_cli(std::env::args_os().collect()) {
        match e.downcast_ref::<clap::Error>() {
            Some(clap_err) => clap_err.exit(),
            None => {
                eprintln!("error: {e:#}");
                std::process::exit(1);
            }
        }
    }
}
