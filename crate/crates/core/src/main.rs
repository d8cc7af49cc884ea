fn main() {
    if std::env::var(ndels::cli::DETERMINISTIC_ENV).as_deref() == Ok("1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(ndels::cli::main_with_args(std::env::args_os()));
}
