/// Training allocates and frees the same large im2col buffers every batch.
/// glibc serves blocks above its mmap threshold with fresh mappings, so each
/// batch would page-fault them in again; keeping them on the heap lets the
/// allocator reuse the pages.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    const LIMIT: libc::c_int = 1 << 30;
    // SAFETY: mallopt only adjusts allocator parameters and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
        libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

fn main() {
    keep_freed_memory();
    std::process::exit(bnn_core::cli::run());
}
