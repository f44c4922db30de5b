/** Application state machine behind the review screens.
 *
 * Holds no state the server cannot reconstruct: the committed chain always
 * mirrors what the server confirmed, and unsaved textarea edits live in a
 * separate draft map that a reload simply loses. Every user action posts at
 * most one verification event, and a busy flag drops re-entrant actions so
 * double clicks cannot double-post.
 */

import { ApiError, ReviewApiClient } from "./api.js";
import type { ChainView, SampleSummary } from "./types.js";
import {
  EVENT_ACCEPTED,
  EVENT_EDITED_STEP,
  EVENT_FINAL_ANSWER_EDITED,
  EVENT_REJECTED,
  EVENT_STEP_ADDED,
  EVENT_STEP_REMOVED,
} from "./types.js";

export type Screen = "queue" | "editor";

export interface EditorState {
  sampleId: string;
  question: string;
  category: string;
  /** Server-confirmed chain (committed events only). */
  chain: ChainView;
  /** Unsaved step edits keyed by 1-based index. */
  drafts: Map<number, string>;
  draftFinalAnswer: string | null;
  /** Set when the server blocked Accept with a min-steps 409. */
  minStepsBlocked: boolean;
  blockMessage: string | null;
}

export interface ControllerState {
  screen: Screen;
  queue: SampleSummary[];
  queueEmpty: boolean;
  editor: EditorState | null;
  busy: boolean;
  toasts: string[];
  error: string | null;
}

export class ReviewController {
  private state: ControllerState = {
    screen: "queue",
    queue: [],
    queueEmpty: true,
    editor: null,
    busy: false,
    toasts: [],
    error: null,
  };

  constructor(
    private readonly api: ReviewApiClient,
    private readonly onChange: (state: ControllerState) => void = () => {},
  ) {}

  snapshot(): ControllerState {
    return this.state;
  }

  private update(patch: Partial<ControllerState>): void {
    this.state = { ...this.state, ...patch };
    this.onChange(this.state);
  }

  private toast(message: string): void {
    this.update({ toasts: [...this.state.toasts, message] });
  }

  /** Runs one guarded action; re-entrant calls are dropped, not queued. */
  private async guarded<T>(action: () => Promise<T>): Promise<T | null> {
    if (this.state.busy) return null;
    this.update({ busy: true, error: null });
    try {
      return await action();
    } finally {
      this.update({ busy: false });
    }
  }

  async loadQueue(state: "Pending" | "InReview" = "InReview"): Promise<void> {
    await this.guarded(async () => {
      const rows = await this.api.queue(state);
      this.update({ queue: rows, queueEmpty: rows.length === 0 });
    });
  }

  /** Claim a queue row: one lease call; the editor opens on the chain the
   * queue row carried. Losing the race removes the row and toasts. */
  async claim(row: SampleSummary): Promise<boolean> {
    const outcome = await this.guarded(async () => {
      try {
        await this.api.lease(row.id);
      } catch (error) {
        if (error instanceof ApiError && error.status === 423) {
          this.toast(`"${row.id}" is claimed by another reviewer`);
          this.update({
            queue: this.state.queue.filter((r) => r.id !== row.id),
          });
          return false;
        }
        throw error;
      }
      if (!row.chain) {
        this.toast(`"${row.id}" has no generated chain yet`);
        return false;
      }
      this.update({
        screen: "editor",
        editor: {
          sampleId: row.id,
          question: row.question,
          category: row.category,
          chain: {
            steps: [...row.chain.steps],
            final_answer: row.chain.final_answer,
          },
          drafts: new Map(),
          draftFinalAnswer: null,
          minStepsBlocked: false,
          blockMessage: null,
        },
      });
      return true;
    });
    return outcome === true;
  }

  /** Local-only draft edit; nothing is posted until commitStep. */
  setDraftStep(index: number, text: string): void {
    const editor = this.requireEditor();
    const drafts = new Map(editor.drafts);
    if (text === editor.chain.steps[index - 1]) {
      drafts.delete(index);
    } else {
      drafts.set(index, text);
    }
    this.update({ editor: { ...editor, drafts } });
  }

  /** Posts one EditedStep event for the drafted text of one step. */
  async commitStep(index: number): Promise<boolean> {
    const editor = this.requireEditor();
    const draft = editor.drafts.get(index);
    if (draft === undefined || !draft.trim()) return false;
    return this.postAndApply(EVENT_EDITED_STEP, { index, text: draft });
  }

  async addStep(position: number, text: string): Promise<boolean> {
    if (!text.trim()) return false;
    return this.postAndApply(EVENT_STEP_ADDED, { position, text });
  }

  async removeStep(index: number): Promise<boolean> {
    return this.postAndApply(EVENT_STEP_REMOVED, { index });
  }

  async commitFinalAnswer(): Promise<boolean> {
    const editor = this.requireEditor();
    const draft = editor.draftFinalAnswer;
    if (draft === null || !draft.trim() || draft === editor.chain.final_answer) {
      return false;
    }
    return this.postAndApply(EVENT_FINAL_ANSWER_EDITED, { text: draft });
  }

  setDraftFinalAnswer(text: string): void {
    const editor = this.requireEditor();
    this.update({
      editor: {
        ...editor,
        draftFinalAnswer: text === editor.chain.final_answer ? null : text,
      },
    });
  }

  /** Accept the sample; a min-steps 409 blocks and highlights instead. */
  async accept(): Promise<boolean> {
    return this.postTerminal(EVENT_ACCEPTED);
  }

  async reject(): Promise<boolean> {
    return this.postTerminal(EVENT_REJECTED);
  }

  backToQueue(): void {
    this.update({ screen: "queue", editor: null });
  }

  private requireEditor(): EditorState {
    if (!this.state.editor) throw new Error("no sample open in the editor");
    return this.state.editor;
  }

  private async postAndApply(
    kind: string,
    payload: Record<string, unknown>,
  ): Promise<boolean> {
    const outcome = await this.guarded(async () => {
      const editor = this.requireEditor();
      const summary = await this.api.postEvent(editor.sampleId, kind, payload);
      const chain = summary.chain
        ? { steps: [...summary.chain.steps], final_answer: summary.chain.final_answer }
        : editor.chain;
      const drafts = new Map(editor.drafts);
      if (kind === EVENT_EDITED_STEP) drafts.delete(payload.index as number);
      this.update({
        editor: {
          ...editor,
          chain,
          drafts: kind === EVENT_EDITED_STEP ? drafts : new Map(),
          draftFinalAnswer:
            kind === EVENT_FINAL_ANSWER_EDITED ? null : editor.draftFinalAnswer,
          minStepsBlocked: false,
          blockMessage: null,
        },
      });
      return true;
    });
    return outcome === true;
  }

  private async postTerminal(kind: string): Promise<boolean> {
    const outcome = await this.guarded(async () => {
      const editor = this.requireEditor();
      try {
        await this.api.postEvent(editor.sampleId, kind);
      } catch (error) {
        if (
          error instanceof ApiError &&
          error.status === 409 &&
          error.reason === "min-steps"
        ) {
          this.update({
            editor: {
              ...editor,
              minStepsBlocked: true,
              blockMessage:
                `This chain has ${editor.chain.steps.length} steps; ` +
                "add the missing reasoning steps before accepting.",
            },
          });
          return false;
        }
        if (error instanceof ApiError) {
          this.update({ error: error.message });
          return false;
        }
        throw error;
      }
      this.update({
        screen: "queue",
        editor: null,
        queue: this.state.queue.filter((r) => r.id !== editor.sampleId),
      });
      return true;
    });
    return outcome === true;
  }
}
