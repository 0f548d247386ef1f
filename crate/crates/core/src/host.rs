//! Host identity used by the hostname distribution strategy.

/// Overrides the reported hostname, e.g. to emulate several nodes on one machine.
pub const HOSTNAME_ENV: &str = "CHUNKSTREAM_HOSTNAME";

pub fn local_hostname() -> String {
    if let Ok(h) = std::env::var(HOSTNAME_ENV) {
        if !h.is_empty() {
            return h;
        }
    }
    let mut buf = [0u8; 256];
    // SAFETY: buf is valid for buf.len() bytes and gethostname NUL-terminates on success.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc == 0 {
        let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
        if let Ok(s) = std::str::from_utf8(&buf[..end]) {
            if !s.is_empty() {
                return s.to_owned();
            }
        }
    }
    "localhost".to_owned()
}
