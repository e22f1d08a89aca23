fn main() {
    if let Some(t) = std::env::var("RBLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if t > 0 {
            // only fails if a pool already exists, which cannot happen this early
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    std::process::exit(rblab_cli::main_with(std::env::args_os()));
}
