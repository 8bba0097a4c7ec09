// Execution console for one twin: lifecycle buttons driven entirely by the
// API's allowed_transitions (a transition the server would refuse is never
// rendered as clickable), job submission with a mode picker, a live log pane
// over the follow stream, and terminate-with-grace.

import { Api, Dt, Job, LogFollower } from "../api";
import { el, clear, fmtTime } from "../dom";

export class ExecutionConsole {
  readonly root = el("section.console");
  private dt: Dt | null = null;
  private jobs: Job[] = [];
  private logLines: string[] = [];
  private follower: LogFollower | null = null;
  private followedJob: string | null = null;
  private mode: "oneoff" | "continuous" = "oneoff";
  private timeLimit = "60";
  private grace = "5";
  private notice: string | null = null;
  private disposed = false;

  constructor(
    private readonly api: Api,
    readonly dtId: string,
  ) {
    this.render();
  }

  async refresh(): Promise<void> {
    const [dt, { jobs }] = await Promise.all([
      this.api.showDt(this.dtId),
      this.api.listJobs(this.dtId),
    ]);
    this.dt = dt;
    this.jobs = jobs;
    this.render();
  }

  // refresh() for fire-and-forget callers: a failure is rendered, not thrown.
  private async tryRefresh(): Promise<void> {
    if (this.disposed) return;
    try {
      await this.refresh();
    } catch (err) {
      this.notice = err instanceof Error ? err.message : String(err);
      this.render();
    }
  }

  allowed(): string[] {
    return this.dt?.allowed_transitions ?? [];
  }

  async transition(target: string): Promise<void> {
    this.notice = null;
    try {
      this.dt = await this.api.transitionDt(this.dtId, target);
    } catch (err) {
      // Buttons only exist for allowed transitions, so this is a race with
      // someone else driving the twin — surface it verbatim.
      this.notice = err instanceof Error ? err.message : String(err);
    }
    await this.tryRefresh();
  }

  async submitJob(): Promise<Job | null> {
    this.notice = null;
    try {
      const opts: { mode: string; time_limit_s?: number } = { mode: this.mode };
      if (this.mode === "oneoff") opts.time_limit_s = Number(this.timeLimit) || 60;
      const job = await this.api.submitJob(this.dtId, opts);
      await this.refresh();
      this.followJob(job.job_id);
      return job;
    } catch (err) {
      this.notice = err instanceof Error ? err.message : String(err);
      this.render();
      return null;
    }
  }

  followJob(jobId: string): void {
    this.follower?.cancel();
    this.logLines = [];
    this.followedJob = jobId;
    this.follower = this.api.followLogs(jobId, (line) => {
      this.logLines.push(line);
      this.renderLogPane();
    });
    void this.follower.done
      .then(() => {
        // Stream closed: the job reached a terminal state. One refresh picks
        // up the final status chip without any page reload.
        if (!this.disposed) return this.tryRefresh();
      })
      .catch(() => {
        // The view was torn down or the instance went away mid-stream;
        // there is nothing left to render either way.
      });
    this.render();
  }

  async terminate(jobId: string): Promise<void> {
    this.notice = null;
    try {
      await this.api.terminateJob(jobId, Number(this.grace) || 0);
    } catch (err) {
      this.notice = err instanceof Error ? err.message : String(err);
    }
    await this.tryRefresh();
  }

  dispose(): void {
    this.disposed = true;
    this.follower?.cancel();
  }

  private renderLogPane(): void {
    const pane = this.root.querySelector("pre.logs");
    if (pane) pane.textContent = this.logLines.join("\n");
  }

  render(): void {
    const dt = this.dt;
    clear(this.root).append(
      el(
        "header.console-head",
        {},
        el("h2", {}, dt ? `${dt.name} ` : "…", el("code", {}, this.dtId)),
        el("span.phase-chip", { dataset: { phase: dt?.state?.current ?? "" } }, dt?.state?.current ?? ""),
      ),
      el(
        "div.transitions",
        {},
        ...this.allowed().map((phase) =>
          el(
            "button.transition",
            { dataset: { phase }, onclick: () => void this.transition(phase) },
            phase,
          ),
        ),
      ),
      el(
        "div.job-submit",
        {},
        el(
          "select.mode",
          {
            value: this.mode,
            onchange: (e: Event) => {
              this.mode = (e.target as HTMLSelectElement).value as "oneoff" | "continuous";
              this.render();
            },
          },
          el("option", { value: "oneoff", selected: this.mode === "oneoff" }, "one-off"),
          el("option", { value: "continuous", selected: this.mode === "continuous" }, "continuous"),
        ),
        this.mode === "oneoff"
          ? el("input.time-limit", {
              value: this.timeLimit,
              size: 6,
              title: "time limit (s)",
              oninput: (e: Event) => {
                this.timeLimit = (e.target as HTMLInputElement).value;
              },
            })
          : null,
        el("button.run", { onclick: () => void this.submitJob() }, "run"),
      ),
      el(
        "table.jobs",
        {},
        el(
          "tbody",
          {},
          ...this.jobs.map((job) =>
            el(
              "tr",
              { dataset: { jobId: job.job_id } },
              el("td", {}, el("code", {}, job.job_id)),
              el("td", {}, job.mode.kind),
              el(
                "td",
                {},
                el("span.chip", { dataset: { status: job.status }, className: `chip status-${job.status}` }, job.status),
              ),
              el("td", {}, `restarts ${job.restart_count}`),
              el("td", {}, fmtTime(job.submitted_at)),
              el(
                "td",
                {},
                el("button.watch", { onclick: () => this.followJob(job.job_id) }, "logs"),
                el("button.terminate", { onclick: () => void this.terminate(job.job_id) }, "terminate"),
              ),
            ),
          ),
        ),
      ),
      el(
        "div.terminate-grace",
        {},
        el("label", {}, "grace (s) "),
        el("input.grace", {
          value: this.grace,
          size: 4,
          oninput: (e: Event) => {
            this.grace = (e.target as HTMLInputElement).value;
          },
        }),
      ),
      el(
        "div.log-view",
        {},
        el("h3", {}, this.followedJob ? `logs ${this.followedJob}` : "logs"),
        el("pre.logs", {}, this.logLines.join("\n")),
      ),
      this.notice ? el("p.notice.error", {}, this.notice) : el("p.notice.empty", {}),
    );
  }
}
