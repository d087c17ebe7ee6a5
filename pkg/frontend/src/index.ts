/**
 * Thin TypeScript bindings over the anomrl command line.
 *
 * The engine stays in its own process; every call here shells out to the
 * `anomrl` CLI and exchanges UTF-8 JSON documents with it, so the outputs
 * are byte-for-byte the engine's own serialization. Verification rewards
 * need a live oracle and are out of scope: scores returned here always
 * carry a zero verification component unless supplied externally.
 */

import { spawnSync } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

/** Override with ANOMRL_BIN when the CLI is not on PATH. */
const CLI = process.env.ANOMRL_BIN ?? "anomrl";

export interface ParseErrorDoc {
  ok: false;
  error_class: string;
  offset: number;
  message: string;
}

export interface JudgmentDoc {
  category: string;
  interval: [number, number] | null;
}

export interface ParseOkDoc {
  ok: true;
  stages: [string, string][];
  judgment: JudgmentDoc | null;
  risk: string | null;
  answer: string;
}

export type ParseOutcomeDoc = ParseErrorDoc | ParseOkDoc;

export interface RewardBreakdownDoc {
  format: number;
  accuracy: number;
  depth: number;
  risk: number;
  verification: number;
  total: number;
  /** Present only when a group size was given. */
  advantage?: number;
}

/** A question record in the engine's JSONL schema. */
export interface QuestionRecordDoc {
  id: string;
  video_id: string;
  kind: string;
  question: string;
  split: string;
  gold_category: string;
  gold_interval: [number, number] | null;
  gold_letter: string | null;
  gold_risk: string | null;
  choices: [string, string][] | null;
  reference_answer: string | null;
  cot: string | null;
}

export interface ScoreOptions {
  /** Emit per-group normalized advantages over consecutive groups. */
  groupSize?: number;
  /** Seed forwarded to the CLI (default 0). */
  seed?: number;
  /** Config document forwarded as the CLI --config file. */
  config?: Record<string, unknown>;
}

export class CliError extends Error {
  constructor(message: string, public readonly exitCode: number | null) {
    super(message);
    this.name = "CliError";
  }
}

function runCli(args: string[]): string {
  const proc = spawnSync(CLI, args, {
    encoding: "utf-8",
    maxBuffer: 256 * 1024 * 1024,
  });
  if (proc.error) {
    throw new CliError(`failed to launch ${CLI}: ${proc.error.message}`, null);
  }
  if (proc.status !== 0) {
    throw new CliError(
      `${CLI} exited with ${proc.status}: ${proc.stderr.trim()}`,
      proc.status,
    );
  }
  return proc.stdout;
}

function withTempDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "anomrl-frontend-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

function writeLines(path: string, lines: string[]): void {
  writeFileSync(path, lines.map((line) => line + "\n").join(""), "utf-8");
}

function requireSingleLine(texts: string[]): void {
  for (const text of texts) {
    if (text.includes("\n")) {
      throw new Error("response texts must not contain newlines");
    }
  }
}

function outputDocs(stdout: string): string[] {
  return stdout.split("\n").filter((line) => line.length > 0);
}

/** A minimal valid record; parse outcomes do not depend on its contents. */
function placeholderRecord(index: number): QuestionRecordDoc {
  return {
    id: `bound-q${index}`,
    video_id: "bound",
    kind: "PerceptionOpen",
    question: "State what the camera captures in this clip.",
    split: "test",
    gold_category: "normal",
    gold_interval: null,
    gold_letter: null,
    gold_risk: null,
    choices: null,
    reference_answer: "nothing unusual happens",
    cot: null,
  };
}

/**
 * Parse raw response texts and return the engine's serialized outcome lines,
 * one JSON document per input, byte-identical to `anomrl score --parse-only`.
 */
export function boundParseLines(raws: string[]): string[] {
  if (raws.length === 0) {
    return [];
  }
  requireSingleLine(raws);
  return withTempDir((dir) => {
    const records = join(dir, "records.jsonl");
    const responses = join(dir, "responses.txt");
    writeLines(
      records,
      raws.map((_, i) => JSON.stringify(placeholderRecord(i))),
    );
    writeLines(responses, raws);
    const stdout = runCli([
      "score",
      "--parse-only",
      "--data", records,
      "--responses", responses,
      "--out", "-",
    ]);
    return outputDocs(stdout);
  });
}

/** Parse raw response texts into outcome documents. */
export function boundParse(raws: string[]): ParseOutcomeDoc[] {
  return boundParseLines(raws).map((line) => JSON.parse(line));
}

/**
 * Score responses against records and return the engine's serialized reward
 * breakdown lines, byte-identical to `anomrl score`. Records and responses
 * must align one-to-one; a mismatch surfaces as a CliError.
 */
export function boundScoreLines(
  records: QuestionRecordDoc[],
  responses: string[],
  options: ScoreOptions = {},
): string[] {
  if (records.length === 0 && responses.length === 0) {
    return [];
  }
  requireSingleLine(responses);
  return withTempDir((dir) => {
    const recordsPath = join(dir, "records.jsonl");
    const responsesPath = join(dir, "responses.txt");
    writeLines(recordsPath, records.map((r) => JSON.stringify(r)));
    writeLines(responsesPath, responses);
    const args = [
      "score",
      "--data", recordsPath,
      "--responses", responsesPath,
      "--out", "-",
      "--seed", String(options.seed ?? 0),
    ];
    if (options.groupSize !== undefined) {
      args.push("--group-size", String(options.groupSize));
    }
    if (options.config !== undefined) {
      const configPath = join(dir, "config.json");
      writeFileSync(configPath, JSON.stringify(options.config), "utf-8");
      args.push("--config", configPath);
    }
    return outputDocs(runCli(args));
  });
}

/** Score responses against records, returning breakdown documents. */
export function boundScore(
  records: QuestionRecordDoc[],
  responses: string[],
  options: ScoreOptions = {},
): RewardBreakdownDoc[] {
  return boundScoreLines(records, responses, options).map((line) =>
    JSON.parse(line),
  );
}
