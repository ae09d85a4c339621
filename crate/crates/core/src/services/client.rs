//! User-facing query client.

use std::net::TcpStream;
use std::time::Duration;

use super::wire::{Denied, ErrorReply, Message, QueryAnswer, QueryRequest, WireError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Answer(QueryAnswer),
    Denied(Denied),
    Error(ErrorReply),
}

/// Sends one query to the vetter and waits for its reply.
pub fn submit_query(
    vetter_addr: &str,
    req: &QueryRequest,
    timeout: Duration,
) -> Result<Reply, WireError> {
    let mut conn = TcpStream::connect(vetter_addr)?;
    conn.set_read_timeout(Some(timeout))?;
    Message::Query(req.clone()).write_to(&mut conn)?;
    match Message::read_from(&mut conn)? {
        Some(Message::Answer(a)) => Ok(Reply::Answer(a)),
        Some(Message::Denied(d)) => Ok(Reply::Denied(d)),
        Some(Message::Error(e)) => Ok(Reply::Error(e)),
        Some(other) => Err(WireError::Unexpected(other.msg_type().name())),
        None => Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into()),
    }
}

/// Renders an answer for the terminal.
pub fn format_answer(a: &QueryAnswer) -> String {
    let list = |ids: &[u64]| ids.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    match (a.query_type.as_str(), a.count, a.ids.as_deref()) {
        (_, Some(n), _) => format!("count: {n}"),
        ("match", _, Some([])) => "match: no".to_string(),
        ("match", _, Some([id])) => format!("match: yes (id {id})"),
        ("match", _, Some(ids)) => format!("match: yes (ids {})", list(ids)),
        (_, _, Some([])) => "ids: none".to_string(),
        (_, _, Some(ids)) => format!("ids: {}", list(ids)),
        _ => "empty answer".to_string(),
    }
}

pub fn format_denial(d: &Denied) -> String {
    format!("denied ({}): {}", d.reason.as_str(), d.detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(t: &str, count: Option<u64>, ids: Option<Vec<u64>>) -> QueryAnswer {
        QueryAnswer {
            query_type: t.into(),
            count,
            ids,
        }
    }

    #[test]
    fn answer_rendering() {
        assert_eq!(format_answer(&answer("count", Some(2), None)), "count: 2");
        assert_eq!(format_answer(&answer("match", None, Some(vec![7]))), "match: yes (id 7)");
        assert_eq!(format_answer(&answer("match", None, Some(vec![]))), "match: no");
        assert_eq!(
            format_answer(&answer("match", None, Some(vec![2, 5, 7]))),
            "match: yes (ids 2, 5, 7)"
        );
        assert_eq!(format_answer(&answer("boolean", None, Some(vec![2, 5, 7]))), "ids: 2, 5, 7");
        assert_eq!(format_answer(&answer("boolean", None, Some(vec![]))), "ids: none");
    }
}
