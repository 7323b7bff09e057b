fn main() -> std::process::ExitCode {
    // Cap rayon workers when requested; kernels are deterministic for any
    // thread count, this only bounds CPU usage.
    if let Ok(n) = std::env::var("XSURV_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    xsurv::cli::run()
}
