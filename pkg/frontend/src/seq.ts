// One gate per control keeps at most one request current: issuing a new
// ticket supersedes (and aborts) the previous one, and late responses for
// old tickets are dropped by the caller checking isCurrent.

export class SequenceGate {
  private seq = 0;
  private controller: AbortController | null = null;

  issue(): { ticket: number; signal: AbortSignal } {
    this.controller?.abort();
    this.controller = new AbortController();
    this.seq += 1;
    return { ticket: this.seq, signal: this.controller.signal };
  }

  isCurrent(ticket: number): boolean {
    return ticket === this.seq;
  }
}
