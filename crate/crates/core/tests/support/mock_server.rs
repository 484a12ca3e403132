//! Minimal HTTP/1.1 image-generation server on a loopback port.
//!
//! Each connection carries one request. The handler sees the decoded JSON
//! body and returns a status plus reply body.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;

use scenebench_core::imageio;
use scenebench_core::imgops::Image;

pub type Handler = dyn Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync;

#[derive(Clone, Debug)]
pub struct SeenRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

pub struct MockServer {
    pub endpoint: String,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let counter = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::from(handler);
        let thread = {
            let (stop, seen) = (stop.clone(), seen.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (handler, seen, counter) = (handler.clone(), seen.clone(), counter.clone());
                    std::thread::spawn(move || {
                        let _ = serve(stream, handler.as_ref(), &seen, &counter);
                    });
                }
            })
        };
        Self {
            endpoint: format!("http://{addr}"),
            seen,
            stop,
            addr,
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler, seen: &Mutex<Vec<SeenRequest>>, counter: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.trim().is_empty() {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let (mut length, mut authorization) = (0usize, None);
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => length = v.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let n = counter.fetch_add(1, Ordering::SeqCst);
    let (status, reply) = handler(n, &json);
    seen.lock().unwrap().push(SeenRequest {
        path,
        authorization,
        body: json,
    });
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

/// Decodes the RGBA foreground PNG carried by a request.
pub fn request_image(body: &serde_json::Value) -> Image {
    let b64 = body["image"].as_str().expect("image field");
    let bytes = BASE64.decode(b64).expect("base64 image");
    let decoded = image::load_from_memory(&bytes).expect("png").to_rgba8();
    let (w, h) = decoded.dimensions();
    Image::new(w as usize, h as usize, 4, decoded.into_raw()).unwrap()
}

/// Reply carrying `img` as base64 PNG.
pub fn image_reply(img: &Image) -> String {
    let png = imageio::encode_png(img).unwrap();
    serde_json::json!({ "image": BASE64.encode(png), "meta": { "server": "mock" } }).to_string()
}

/// A well-behaved generator: keeps opaque foreground pixels, paints the
/// transparent ones with a flat colour.
pub fn faithful(body: &serde_json::Value) -> Image {
    let rgba = request_image(body);
    let mut data = Vec::with_capacity(rgba.pixel_count() * 3);
    for i in 0..rgba.pixel_count() {
        let p = rgba.px(i);
        if p[3] == 255 {
            data.extend_from_slice(&p[..3]);
        } else {
            data.extend_from_slice(&[40, 120, 200]);
        }
    }
    Image::new(rgba.width(), rgba.height(), 3, data).unwrap()
}

/// A generator that repaints the whole frame, destroying the foreground.
pub fn destructive(body: &serde_json::Value) -> Image {
    let rgba = request_image(body);
    Image::filled(rgba.width(), rgba.height(), [255, 0, 255])
}
