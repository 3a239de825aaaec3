print("crystallat")
