/** Wire types mirrored from the review API's JSON responses. */

export interface ChainView {
  steps: string[];
  final_answer: string;
}

export interface SampleSummary {
  id: string;
  category: string;
  question: string;
  state: string;
  step_count: number;
  chain: ChainView | null;
  leased_by: string | null;
}

export interface SampleDetail extends SampleSummary {
  choices: string[] | null;
  image: { kind: string; value: string; media_type: string };
  provenance: string;
  min_step_exempt: boolean;
  events: VerificationEvent[];
}

export interface VerificationEvent {
  sample_id: string;
  kind: string;
  payload: Record<string, unknown>;
  actor: string;
  ts: number;
}

export interface Lease {
  sample_id: string;
  reviewer: string;
  expires_at: number;
}

export interface CurationStats {
  total: number;
  accepted: number;
  rejected: number;
  fraction_with_any_edit: number;
  total_steps: number;
}

/** Event kinds accepted by POST /sample/{id}/events. */
export const EVENT_EDITED_STEP = "EditedStep";
export const EVENT_STEP_ADDED = "StepAdded";
export const EVENT_STEP_REMOVED = "StepRemoved";
export const EVENT_FINAL_ANSWER_EDITED = "FinalAnswerEdited";
export const EVENT_ACCEPTED = "Accepted";
export const EVENT_REJECTED = "Rejected";
