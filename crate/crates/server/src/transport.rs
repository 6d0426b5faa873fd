//! Byte-stream plumbing shared by the TCP listener, the WebSocket bridge and
//! the plant link.

use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite;

use crate::protocol::MAX_LINE_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    Line(String),
    /// A line longer than the limit was received and discarded.
    TooLong,
}

/// Reads one newline-terminated line, discarding the excess of an overlong
/// one. `None` at end of stream.
pub async fn read_line_bounded<R: AsyncBufRead + Unpin>(
    reader: &mut R,
    max: usize,
) -> std::io::Result<Option<Incoming>> {
    let mut buf = Vec::new();
    let mut overflow = false;
    loop {
        let available = reader.fill_buf().await?;
        if available.is_empty() {
            return Ok(match (buf.is_empty(), overflow) {
                (true, false) => None,
                (_, true) => Some(Incoming::TooLong),
                (false, false) => Some(Incoming::Line(String::from_utf8_lossy(&buf).into_owned())),
            });
        }
        let (chunk, done) = match available.iter().position(|&b| b == b'\n') {
            Some(i) => (&available[..i], i + 1),
            None => (available, available.len()),
        };
        if buf.len() + chunk.len() > max {
            overflow = true;
            buf.clear();
        } else if !overflow {
            buf.extend_from_slice(chunk);
        }
        let found = done > chunk.len();
        reader.consume(done);
        if found {
            if overflow {
                return Ok(Some(Incoming::TooLong));
            }
            if buf.last() == Some(&b'\r') {
                buf.pop();
            }
            return Ok(Some(Incoming::Line(String::from_utf8_lossy(&buf).into_owned())));
        }
    }
}

/// Spawns reader and writer tasks for a line stream. Lines written to the
/// returned sender get a trailing newline; the writer shuts the stream down
/// once every sender is dropped.
pub fn spawn_line_pumps<S>(stream: S) -> (mpsc::Receiver<Incoming>, mpsc::UnboundedSender<String>, tokio::task::JoinHandle<()>)
where
    S: AsyncRead + AsyncWrite + Send + 'static,
{
    let (read_half, mut write_half) = tokio::io::split(stream);
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    tokio::spawn(async move {
        let mut reader = BufReader::new(read_half);
        while let Ok(Some(item)) = read_line_bounded(&mut reader, MAX_LINE_BYTES).await {
            if in_tx.send(item).await.is_err() {
                break;
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(mut line) = out_rx.recv().await {
            line.push('\n');
            if write_half.write_all(line.as_bytes()).await.is_err() {
                return;
            }
        }
        let _ = write_half.shutdown().await;
    });
    (in_rx, out_tx, writer)
}

/// WebSocket counterpart of [`spawn_line_pumps`]: one text frame per line in
/// each direction; frames holding several lines are split.
pub async fn spawn_ws_pumps(
    stream: TcpStream,
) -> Result<(mpsc::Receiver<Incoming>, mpsc::UnboundedSender<String>, tokio::task::JoinHandle<()>), tungstenite::Error> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut sink, mut source) = ws.split();
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    tokio::spawn(async move {
        while let Some(Ok(frame)) = source.next().await {
            let text = match frame {
                tungstenite::Message::Text(t) => t.as_str().to_owned(),
                tungstenite::Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                tungstenite::Message::Close(_) => break,
                _ => continue,
            };
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let item = if line.len() > MAX_LINE_BYTES {
                    Incoming::TooLong
                } else {
                    Incoming::Line(line.to_owned())
                };
                if in_tx.send(item).await.is_err() {
                    return;
                }
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if sink.send(tungstenite::Message::text(line)).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    Ok((in_rx, out_tx, writer))
}
