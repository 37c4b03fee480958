fn main() {
    // die quietly on a closed pipe (`turbo ... | head`) instead of panicking
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(turbo_core::cli::run(std::env::args_os()));
}
